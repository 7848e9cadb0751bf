//! Alpha-expansion for the grid Potts energy.
//!
//! Each move asks every pixel whether to keep its label or switch to
//! `alpha`; the binary subproblem is solved exactly by one min-cut. Pairs of
//! neighbours holding different (non-alpha) labels get an auxiliary node so
//! that the cut pays exactly the Potts penalty of the resulting labeling.
//! Source side = keep, sink side = take `alpha`. Seed pixels get a source
//! link larger than the sum of all other capacities.

use super::{HardLabeling, Label, PottsGrid};
use crate::maxflow::{Graph, Segment};
use crate::scalar::Real;
use crate::{Error, Result};

/// A move must lower the energy by more than this to be accepted.
pub const MOVE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Expansion<T> {
    pub labeling: HardLabeling,
    pub energy: T,
    /// Full sweeps over the allowed labels that were started.
    pub sweeps: usize,
    /// True when a full sweep produced no improving move.
    pub converged: bool,
    /// Energy before the first move and after every accepted move.
    pub trace: Vec<T>,
}

pub fn alpha_expansion<T: Real>(
    crf: &PottsGrid<T>,
    init: &HardLabeling,
    max_sweeps: usize,
) -> Result<Expansion<T>> {
    crf.check_labeling(init)?;
    if crf.allowed_labels().is_empty() {
        return Err(Error::Infeasible("empty allowed label set".into()));
    }
    if !crf.is_feasible(init) {
        return Err(Error::Infeasible(
            "initial labeling violates a seed or uses a disallowed label".into(),
        ));
    }
    let tol = T::lit(MOVE_TOLERANCE);
    let mut current = init.clone();
    let mut energy = crf.energy(&current)?;
    let mut trace = vec![energy];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut improved = false;
        for &alpha in crf.allowed_labels() {
            let Some(candidate) = expansion_move(crf, &current, alpha)? else {
                continue;
            };
            let e = crf.energy(&candidate)?;
            if e < energy - tol {
                current = candidate;
                energy = e;
                trace.push(e);
                improved = true;
            }
        }
        if !improved {
            converged = true;
            break;
        }
    }
    debug_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    Ok(Expansion {
        labeling: current,
        energy,
        sweeps,
        converged,
        trace,
    })
}

/// Optimal alpha-expansion of `current`; `None` if no pixel can move.
fn expansion_move<T: Real>(
    crf: &PottsGrid<T>,
    current: &HardLabeling,
    alpha: Label,
) -> Result<Option<HardLabeling>> {
    let labels = current.labels();
    let n = labels.len();
    const FIXED: usize = usize::MAX;

    // node ids for pixels that may switch
    let mut node = vec![FIXED; n];
    let mut count = 0;
    for i in 0..n {
        if labels[i] != alpha {
            node[i] = count;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }

    // terminal costs: (cost if kept, cost if switched to alpha)
    let mut keep = vec![T::zero(); count];
    let mut switch = vec![T::zero(); count];
    for i in 0..n {
        if node[i] != FIXED {
            keep[node[i]] = crf.unary(i, labels[i]);
            switch[node[i]] = crf.unary(i, alpha);
        }
    }

    enum Link<T> {
        Edge(usize, usize, T),
        Aux(usize, usize, T),
    }
    let mut links = Vec::new();
    for p in crf.pairs() {
        if p.weight == T::zero() {
            continue;
        }
        let (la, lb) = (labels[p.a], labels[p.b]);
        match (node[p.a], node[p.b]) {
            (FIXED, FIXED) => {}
            // a fixed neighbour: pay w when the free pixel's final label
            // differs from the fixed one
            (FIXED, v) => {
                if lb != la {
                    keep[v] += p.weight;
                }
                if alpha != la {
                    switch[v] += p.weight;
                }
            }
            (u, FIXED) => {
                if la != lb {
                    keep[u] += p.weight;
                }
                if alpha != lb {
                    switch[u] += p.weight;
                }
            }
            (u, v) if la == lb => links.push(Link::Edge(u, v, p.weight)),
            (u, v) => links.push(Link::Aux(u, v, p.weight)),
        }
    }

    let aux_count = links.iter().filter(|l| matches!(l, Link::Aux(..))).count();
    let mut g = Graph::<T>::with_capacity(count + aux_count, links.len() + aux_count);
    g.add_nodes(count);
    for l in &links {
        match *l {
            Link::Edge(u, v, w) => g.add_edge(u, v, w, w)?,
            Link::Aux(u, v, w) => {
                let a = g.add_node();
                g.add_edge(u, a, w, w)?;
                g.add_edge(a, v, w, w)?;
                g.add_terminal_weights(a, T::zero(), w)?;
            }
        }
    }
    for u in 0..count {
        // source link is cut when u switches, sink link when it keeps
        let m = if keep[u] < switch[u] { keep[u] } else { switch[u] };
        g.add_terminal_weights(u, switch[u] - m, keep[u] - m)?;
    }
    // Seeds must keep their label: a source link heavier than every finite
    // capacity combined can never be cut.
    let hard = g.total_capacity() + T::one();
    for i in 0..n {
        if node[i] != FIXED && crf.seeds()[i].is_some() {
            g.add_terminal_weights(node[i], hard, T::zero())?;
        }
    }
    g.solve()?;

    let mut out = current.clone();
    for i in 0..n {
        if node[i] != FIXED && g.min_cut_side(node[i])? == Segment::Sink {
            out.set(i, alpha);
        }
    }
    Ok(Some(out))
}

/// Exhaustive minimum over every feasible labeling (allowed labels, seeds
/// respected). Test oracle: `|allowed|^N` evaluations.
pub fn brute_force_minimum<T: Real>(crf: &PottsGrid<T>) -> Result<(HardLabeling, T)> {
    let n = crf.pixel_count();
    let allowed = crf.allowed_labels().to_vec();
    let free: Vec<usize> = (0..n).filter(|&i| crf.seeds()[i].is_none()).collect();
    let total = (allowed.len() as u64)
        .checked_pow(free.len() as u32)
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| Error::InvalidArgument("instance too large for brute force".into()))?;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| crf.seeds()[i].unwrap_or(allowed[0]))
        .collect();
    let mut best: Option<(HardLabeling, T)> = None;
    let mut digits = vec![0usize; free.len()];
    for _ in 0..total {
        for (d, &i) in digits.iter().zip(&free) {
            labels[i] = allowed[*d];
        }
        let s = HardLabeling::new(crf.height(), crf.width(), labels.clone())?;
        let e = crf.energy(&s)?;
        if best.as_ref().map_or(true, |(_, b)| e < *b) {
            best = Some((s, e));
        }
        for d in digits.iter_mut() {
            *d += 1;
            if *d < allowed.len() {
                break;
            }
            *d = 0;
        }
    }
    best.ok_or_else(|| Error::Infeasible("no feasible labeling".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::PartialLabeling;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, k: usize, size: usize) -> PottsGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PottsGrid::<f64>::new(size, size, k).unwrap();
        let unary = (0..size * size * k).map(|_| rng.gen_range(0.0..4.0)).collect();
        g.set_unaries(unary).unwrap();
        g.set_weights(|_, _| rng.gen_range(0.0..2.0)).unwrap();
        g
    }

    #[test]
    fn zero_pairwise_is_pointwise_argmin() {
        let mut g = random_instance(3, 4, 4);
        g.set_weights(|_, _| 0.0).unwrap();
        let mut seeds = PartialLabeling::empty(4, 4);
        seeds.set(5, Some(2));
        g.set_seeds(&seeds).unwrap();
        let init = HardLabeling::new(4, 4, (0..16).map(|i| if i == 5 { 2 } else { 0 }).collect()).unwrap();
        let out = alpha_expansion(&g, &init, 5).unwrap();
        assert_eq!(out.labeling, g.unary_argmin());
        assert_eq!(out.labeling.labels()[5], 2);
    }

    #[test]
    fn binary_is_exact() {
        for seed in 0..50 {
            let g = random_instance(seed, 2, 3);
            let init = HardLabeling::constant(3, 3, 0).unwrap();
            let out = alpha_expansion(&g, &init, 5).unwrap();
            let (_, best) = brute_force_minimum(&g).unwrap();
            assert!((out.energy - best).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn converged_result_is_expansion_local_minimum() {
        for seed in 0..20 {
            let g = random_instance(100 + seed, 3, 3);
            let init = HardLabeling::constant(3, 3, 1).unwrap();
            let out = alpha_expansion(&g, &init, 50).unwrap();
            assert!(out.converged);
            // no subset of pixels switching to any alpha improves the energy
            for alpha in 0..3u8 {
                for mask in 0u32..(1 << 9) {
                    let mut s = out.labeling.clone();
                    for i in 0..9 {
                        if mask >> i & 1 == 1 {
                            s.set(i, alpha);
                        }
                    }
                    assert!(g.energy(&s).unwrap() >= out.energy - 1e-9);
                }
            }
        }
    }

    #[test]
    fn seeds_are_preserved_and_energy_never_increases() {
        for seed in 0..20 {
            let mut g = random_instance(200 + seed, 3, 4);
            let mut seeds = PartialLabeling::empty(4, 4);
            seeds.set(0, Some(2));
            seeds.set(15, Some(1));
            g.set_seeds(&seeds).unwrap();
            let mut init = g.unary_argmin();
            init.set(0, 2);
            init.set(15, 1);
            let out = alpha_expansion(&g, &init, 5).unwrap();
            assert!(seeds.satisfied_by(&out.labeling));
            assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(out.energy <= g.energy(&init).unwrap());
        }
    }

    #[test]
    fn infeasible_init_and_empty_labels() {
        let mut g = random_instance(1, 2, 2);
        let mut seeds = PartialLabeling::empty(2, 2);
        seeds.set(0, Some(1));
        g.set_seeds(&seeds).unwrap();
        let init = HardLabeling::constant(2, 2, 0).unwrap();
        assert!(matches!(alpha_expansion(&g, &init, 5), Err(Error::Infeasible(_))));
    }

    #[test]
    fn generic_over_f32() {
        let mut g = PottsGrid::<f32>::new(3, 3, 2).unwrap();
        let unary: Vec<f32> = (0..18).map(|i| ((i * 7) % 5) as f32).collect();
        g.set_unaries(unary).unwrap();
        g.set_weights(|_, _| 1.0).unwrap();
        let out = alpha_expansion(&g, &HardLabeling::constant(3, 3, 0).unwrap(), 5).unwrap();
        let (_, best) = brute_force_minimum(&g).unwrap();
        assert!((out.energy - best).abs() < 1e-4);
    }
}
