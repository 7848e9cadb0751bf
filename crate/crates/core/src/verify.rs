//! Oracle and invariant suites behind `verify` and the acceptance tests.
//!
//! Each suite returns a [`SuiteReport`]; a suite passes when it has no
//! failures. Random instances are drawn from a fixed seed.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{alpha_expansion, brute_force_minimum, stage_a_solve, HardLabeling, PartialLabeling, PottsGrid, StageAOptions};
use crate::data::pnm::{self, Pixmap};
use crate::diffcore::{LayerSpec, ModelParams, Tape, Tensor};
use crate::losses::{cross_entropy, LogProbs, SoftSegmentation};
use crate::maxflow::{brute_force_min_cut, Algorithm, Graph};
use crate::metrics::{miou, ConfusionMatrix};
use crate::trainer::verify_chainrule_decomposition;
use crate::{gradcheck, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Free-form summary (worst error, match rate, ...).
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} cases ok, {} ({:.2?})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases - self.failures,
            self.cases,
            self.detail,
            self.elapsed
        )
    }
}

fn rng_for(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Random flow network with at most `max_nodes` nodes including the two
/// terminals, at most `max_arcs` arcs with positive capacity, integer
/// capacities in `1..=max_cap`.
pub fn random_flow_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_arcs: usize, max_cap: i64) -> Graph<i64> {
    let n = rng.gen_range(1..=max_nodes - 2);
    let mut g = Graph::<i64>::with_capacity(n, max_arcs);
    g.add_nodes(n);
    let arcs = rng.gen_range(1..=max_arcs);
    for _ in 0..arcs {
        let cap = rng.gen_range(1..=max_cap);
        // 0: source -> u, 1: u -> sink, otherwise an inner arc
        match rng.gen_range(0..4) {
            0 => g.add_terminal_weights(rng.gen_range(0..n), cap, 0).expect("valid node"),
            1 => g.add_terminal_weights(rng.gen_range(0..n), 0, cap).expect("valid node"),
            _ if n >= 2 => {
                let u = rng.gen_range(0..n);
                let mut v = rng.gen_range(0..n - 1);
                if v >= u {
                    v += 1;
                }
                g.add_edge(u, v, cap, 0).expect("valid edge");
            }
            _ => g.add_terminal_weights(0, cap, 0).expect("valid node"),
        }
    }
    g
}

/// Max-flow value and cut of both algorithms against exhaustive min-cut.
pub fn maxflow_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut failures = 0;
    for i in 0..cases {
        let mut rng = rng_for(seed, i);
        let g = random_flow_graph(&mut rng, 12, 40, 10);
        let (best, _) = brute_force_min_cut(&g);
        for alg in [Algorithm::BoykovKolmogorov, Algorithm::EdmondsKarp] {
            let mut h = g.clone();
            let flow = h.solve_with(alg)?;
            let cut = h.cut()?.to_vec();
            if flow != best || g.cut_capacity(&cut) != best || h.check_invariants(0).is_err() {
                failures += 1;
            }
        }
    }
    Ok(SuiteReport {
        name: "maxflow-brute-force".into(),
        cases: 2 * cases,
        failures,
        detail: "exact integer flow value and cut".into(),
        elapsed: start.elapsed(),
    })
}

/// 3x3 Potts instance with small integer energies, so that every energy
/// is exact in floating point.
pub fn random_potts(rng: &mut ChaCha8Rng, size: usize, labels: usize) -> Result<PottsGrid<f64>> {
    let mut g = PottsGrid::<f64>::new(size, size, labels)?;
    g.set_unaries((0..size * size * labels).map(|_| rng.gen_range(0..10) as f64).collect())?;
    g.set_weights(|_, _| rng.gen_range(0..5) as f64)?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionStats {
    pub instances: usize,
    /// Instances where expansion reached the exhaustive optimum.
    pub optimal: usize,
    /// Largest `energy / optimum` (1 when the optimum is 0 and matched).
    pub worst_ratio: f64,
}

impl ExpansionStats {
    pub fn optimal_fraction(&self) -> f64 {
        self.optimal as f64 / self.instances as f64
    }
}

/// Alpha-expansion from a constant labeling on random 3x3 instances.
pub fn expansion_stats(instances: usize, labels: usize, seed: u64) -> Result<ExpansionStats> {
    let mut stats = ExpansionStats {
        instances,
        optimal: 0,
        worst_ratio: 1.0,
    };
    for i in 0..instances {
        let mut rng = rng_for(seed, i);
        let g = random_potts(&mut rng, 3, labels)?;
        let out = alpha_expansion(&g, &HardLabeling::constant(3, 3, 0)?, 100)?;
        let (_, best) = brute_force_minimum(&g)?;
        if out.energy == best {
            stats.optimal += 1;
        } else {
            let ratio = if best > 0.0 { out.energy / best } else { f64::INFINITY };
            stats.worst_ratio = stats.worst_ratio.max(ratio);
        }
    }
    Ok(stats)
}

/// Binary instances must be solved exactly; three labels within a factor
/// of two, and exactly on at least 90% of instances.
pub fn expansion_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let two = expansion_stats(instances, 2, seed)?;
    let three = expansion_stats(instances, 3, seed.wrapping_add(1))?;
    let failures = (two.instances - two.optimal)
        + usize::from(three.worst_ratio > 2.0)
        + usize::from(three.optimal_fraction() < 0.9);
    Ok(SuiteReport {
        name: "expansion-brute-force".into(),
        cases: 2 * instances,
        failures,
        detail: format!(
            "K=2 optimal {}/{}, K=3 optimal {}/{} worst ratio {:.3}",
            two.optimal, two.instances, three.optimal, three.instances, three.worst_ratio
        ),
        elapsed: start.elapsed(),
    })
}

/// Finite-difference checks of every op, layer and loss.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = gradcheck::op_suite(instances, seed)?;
    checks.extend(gradcheck::loss_suite(instances, seed)?);
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    Ok(SuiteReport {
        name: "gradient-check".into(),
        cases: checks.len(),
        failures: failed.len(),
        detail: if failed.is_empty() {
            format!("worst relative error {:.2e} ({})", worst.max_rel_error, worst.name)
        } else {
            format!("failed: {}", failed.join(", "))
        },
        elapsed: start.elapsed(),
    })
}

/// Largest residual of the two-stage decomposition on the micro-net with
/// cross-entropy, over `instances` random nets and images.
pub fn chainrule_residual(instances: usize, seed: u64) -> Result<f64> {
    let (h, w, k) = (4, 4, 3);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = rng_for(seed, i);
        let params = ModelParams::init(LayerSpec::micro(3, k), rng.gen())?;
        let image = Tensor::from_fn(vec![h, w, 3], |_| rng.gen_range(0.0..1.0))?;
        let labels = HardLabeling::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k as u8)).collect())?;
        let loss = |tape: &mut Tape, s: crate::diffcore::Var| {
            // s holds probabilities; cross-entropy on their logs
            let p = tape.reshape(s, vec![h * w, k])?;
            let lp = tape.log(p)?;
            let q = LogProbs {
                var: lp,
                height: h,
                width: w,
                classes: k,
            };
            cross_entropy(tape, &q, &labels)
        };
        let r = verify_chainrule_decomposition(&params, &image, &loss, rng.gen_range(0.01..0.5))?;
        worst = worst.max(r.decomposition_residual).max(r.least_squares_residual);
    }
    Ok(worst)
}

pub fn chainrule_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let worst = chainrule_residual(instances, seed)?;
    Ok(SuiteReport {
        name: "chain-rule".into(),
        cases: instances,
        failures: usize::from(!(worst < 1e-10)),
        detail: format!("max residual {worst:.2e}"),
        elapsed: start.elapsed(),
    })
}

fn random_soft(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Result<SoftSegmentation> {
    let logits = Tensor::from_fn(vec![h, w, k], |_| rng.gen_range(-3.0..3.0))?;
    SoftSegmentation::from_logits(&logits)
}

fn random_seeds(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, count: usize) -> Result<PartialLabeling> {
    let mut seeds = PartialLabeling::empty(h, w);
    for _ in 0..count {
        seeds.set(rng.gen_range(0..h * w), Some(rng.gen_range(0..k as u8)));
    }
    Ok(seeds)
}

/// Stage-A instance on an `h x w` random image.
struct StageAInstance {
    base: PottsGrid<f64>,
    q: SoftSegmentation,
    seeds: PartialLabeling,
}

fn stage_a_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Result<StageAInstance> {
    let image = Tensor::from_fn(vec![h, w, 3], |_| rng.gen_range(0.0..1.0))?;
    Ok(StageAInstance {
        base: PottsGrid::from_image(&image, 0.2, rng.gen_range(0.5..3.0), k)?,
        q: random_soft(rng, h, w, k)?,
        seeds: {
            let count = rng.gen_range(1..8);
            random_seeds(rng, h, w, k, count)?
        },
    })
}

/// Stage A keeps every seed and never ends above its starting energy;
/// alpha-expansion never increases the energy from one move to the next.
pub fn stage_a_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut failures = 0;
    for i in 0..instances {
        let mut rng = rng_for(seed, i);
        let inst = stage_a_instance(&mut rng, 8, 8, 4)?;
        let lambda = rng.gen_range(0.0..2.0);
        let out = stage_a_solve(&inst.base, &inst.q, &inst.seeds, &StageAOptions { lambda, ..Default::default() })?;
        if !inst.seeds.satisfied_by(&out.labeling) || out.energy > out.initial_energy {
            failures += 1;
        }
        let g = random_potts(&mut rng, 5, 4)?;
        let init = g.unary_argmin();
        let e = alpha_expansion(&g, &init, 10)?;
        if e.trace.windows(2).any(|p| p[1] > p[0]) {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "stage-a-seeds-and-energy".into(),
        cases: 2 * instances,
        failures,
        detail: "seeds kept, energy non-increasing".into(),
        elapsed: start.elapsed(),
    })
}

/// With `lambda = 0` the proposal does not depend on the network output;
/// with a very large `lambda` it is the seeded argmax of the output.
pub fn lambda_limits_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut failures = 0;
    for i in 0..instances {
        let mut rng = rng_for(seed, i);
        let (h, w, k) = (8, 8, 3);
        let inst = stage_a_instance(&mut rng, h, w, k)?;
        let other = random_soft(&mut rng, h, w, k)?;
        let opts = StageAOptions {
            lambda: 0.0,
            ..Default::default()
        };
        let a = stage_a_solve(&inst.base, &inst.q, &inst.seeds, &opts)?;
        let b = stage_a_solve(&inst.base, &other, &inst.seeds, &opts)?;
        if a.labeling != b.labeling {
            failures += 1;
        }

        let all: Vec<u8> = (0..k as u8).collect();
        let opts = StageAOptions {
            lambda: 1e8,
            allowed: Some(&all),
            ..Default::default()
        };
        let out = stage_a_solve(&inst.base, &inst.q, &inst.seeds, &opts)?;
        let mut expected = inst.q.argmax();
        for (p, l) in inst.seeds.seeds() {
            expected.set(p, l);
        }
        if out.labeling != expected {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "lambda-limits".into(),
        cases: 2 * instances,
        failures,
        detail: "lambda=0 fixity, large-lambda argmax".into(),
        elapsed: start.elapsed(),
    })
}

/// Image, label and scribble maps survive an encode / decode cycle.
pub fn pnm_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut failures = 0;
    for i in 0..instances {
        let mut rng = rng_for(seed, i);
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let image = Tensor::from_fn(vec![h, w, 3], |_| rng.gen_range(0..=255u8) as f64 / 255.0)?;
        let back = pnm::pixmap_to_image(&Pixmap::decode(&pnm::image_to_pixmap(&image)?.encode())?)?;
        if back.data().iter().zip(image.data()).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures += 1;
        }
        let labels = HardLabeling::new(h, w, (0..h * w).map(|_| rng.gen_range(0..5)).collect())?;
        if pnm::pixmap_to_labels(&Pixmap::decode(&pnm::labels_to_pixmap(&labels).encode())?)? != labels {
            failures += 1;
        }
        let seeds = random_seeds(&mut rng, h, w, 5, 3)?;
        if pnm::pixmap_to_seeds(&Pixmap::decode(&pnm::seeds_to_pixmap(&seeds).encode())?)? != seeds {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "pixmap-round-trip".into(),
        cases: 3 * instances,
        failures,
        detail: "ppm and pgm".into(),
        elapsed: start.elapsed(),
    })
}

/// A prediction equal to the ground truth scores 1, a prediction sharing
/// no pixel label with it scores 0, and masked-out pixels are ignored.
pub fn miou_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut failures = 0;
    for i in 0..instances {
        let mut rng = rng_for(seed, i);
        let (h, w, k) = (6, 7, 4u8);
        let gt = HardLabeling::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect())?;
        if miou(&gt, &gt, None)? != 1.0 {
            failures += 1;
        }
        let shifted = HardLabeling::new(h, w, gt.labels().iter().map(|l| (l + 1) % k).collect())?;
        if miou(&shifted, &gt, None)? != 0.0 {
            failures += 1;
        }
        let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
        let mixed = HardLabeling::new(
            h,
            w,
            (0..h * w)
                .map(|p| if mask[p] { gt.labels()[p] } else { shifted.labels()[p] })
                .collect(),
        )?;
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(&mixed, &gt, Some(&mask))?;
        if mask.iter().any(|&m| m) && cm.miou() != Some(1.0) {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "miou-trivial-cases".into(),
        cases: 3 * instances,
        failures,
        detail: "identity, disjoint, masked".into(),
        elapsed: start.elapsed(),
    })
}

/// Every suite with its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        maxflow_suite(1000, seed)?,
        expansion_suite(500, seed)?,
        gradcheck_suite(gradcheck::INSTANCES, seed)?,
        chainrule_suite(3, seed)?,
        stage_a_suite(50, seed)?,
        lambda_limits_suite(50, seed)?,
        pnm_suite(50, seed)?,
        miou_suite(50, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in [
            maxflow_suite(50, 1).unwrap(),
            expansion_suite(30, 1).unwrap(),
            stage_a_suite(5, 1).unwrap(),
            lambda_limits_suite(5, 1).unwrap(),
            pnm_suite(5, 1).unwrap(),
            miou_suite(5, 1).unwrap(),
        ] {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn random_graphs_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let g = random_flow_graph(&mut rng, 12, 40, 10);
            assert!(g.node_count() + 2 <= 12);
            let inner = g.arcs().filter(|a| a.2 > 0).count();
            let terminal: usize = (0..g.node_count())
                .map(|u| {
                    let (s, t) = g.terminal_weights(u);
                    usize::from(s > 0) + usize::from(t > 0)
                })
                .sum();
            assert!(inner + terminal <= 40);
        }
    }
}
