//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed even
//! when all criteria pass. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtr_core::crf::HardLabeling;
use rtr_core::data::{generate, DatasetSpec};
use rtr_core::diffcore::{Tape, Tensor};
use rtr_core::losses::{cross_entropy, forward_corrected_ce, robust_ce, LogProbs, NoiseModel, TransitionMatrix};
use rtr_core::trainer::noisy_cls::{epsilon_sweep, NoisyClsConfig};
use rtr_core::trainer::{pretrain_pce, run_from, Method, TrainConfig, TrainState};
use rtr_core::verify;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn maxflow() -> Outcome {
    let t = Instant::now();
    let r = verify::maxflow_suite(1000, 0).expect("suite runs");
    let el = t.elapsed();
    outcome(
        r.passed() && el < Duration::from_secs(10),
        format!("{}/{} solves exact, {}", r.cases - r.failures, r.cases, secs(el)),
    )
}

fn expansion() -> Outcome {
    let t = Instant::now();
    let two = verify::expansion_stats(500, 2, 0).expect("K=2 runs");
    let three = verify::expansion_stats(500, 3, 1).expect("K=3 runs");
    let el = t.elapsed();
    outcome(
        two.optimal == two.instances
            && three.worst_ratio <= 2.0
            && three.optimal_fraction() >= 0.9
            && el < Duration::from_secs(60),
        format!(
            "K=2 optimal {}/{}, K=3 optimal {}/{} worst ratio {:.3}, {}",
            two.optimal,
            two.instances,
            three.optimal,
            three.instances,
            three.worst_ratio,
            secs(el)
        ),
    )
}

fn chain_rule() -> Outcome {
    let worst = verify::chainrule_residual(5, 0).expect("decomposition runs");
    outcome(worst < 1e-10, format!("max residual {worst:.2e}"))
}

fn gradients() -> Outcome {
    let r = verify::gradcheck_suite(20, 0).expect("gradient checks run");
    outcome(r.passed(), format!("{} checks x 20 instances, {}", r.cases, r.detail))
}

fn robust_reductions() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let k = rng.gen_range(2..6);
        let (h, w) = (3, 4);
        let logits = Tensor::from_fn(vec![h, w, k], |_| rng.gen_range(-4.0..4.0)).unwrap();
        let labels = HardLabeling::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k as u8)).collect()).unwrap();
        let eps = rng.gen_range(0.0..(k - 1) as f64 / k as f64 * 0.99);
        let mut tape = Tape::new();
        let x = tape.constant(logits).unwrap();
        let q = LogProbs::from_logits(&mut tape, x).unwrap();
        let r0 = robust_ce(&mut tape, &q, &labels, &NoiseModel::new(0.0, k).unwrap()).unwrap();
        let ce = cross_entropy(&mut tape, &q, &labels).unwrap();
        let re = robust_ce(&mut tape, &q, &labels, &NoiseModel::new(eps, k).unwrap()).unwrap();
        let fc = forward_corrected_ce(&mut tape, &q, &labels, &TransitionMatrix::uniform(eps, k).unwrap()).unwrap();
        worst = worst
            .max((tape.scalar(r0) - tape.scalar(ce)).abs())
            .max((tape.scalar(re) - tape.scalar(fc)).abs());
    }

    // K=2, label 0, logits (-30, 0)
    let grad_at = |eps: Option<f64>| {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 2], vec![-30.0, 0.0]).unwrap()).unwrap();
        let q = LogProbs::from_logits(&mut tape, x).unwrap();
        let labels = HardLabeling::new(1, 1, vec![0]).unwrap();
        let l = match eps {
            Some(e) => robust_ce(&mut tape, &q, &labels, &NoiseModel::new(e, 2).unwrap()).unwrap(),
            None => cross_entropy(&mut tape, &q, &labels).unwrap(),
        };
        tape.backward(l).unwrap();
        tape.grad(x).unwrap()[0].abs()
    };
    let (flat, ce) = (grad_at(Some(0.2)), grad_at(None));
    outcome(
        worst < 1e-12 && flat < 1e-10 && ce > 0.999,
        format!("max reduction gap {worst:.1e}, tail gradient {flat:.1e} (robust) vs {ce:.6} (CE)"),
    )
}

fn noisy_classification() -> Outcome {
    let t = Instant::now();
    let eps = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let rows = epsilon_sweep(&NoisyClsConfig::default(), &eps).expect("sweep runs");
    let el = t.elapsed();
    let acc = |e: f64| rows.iter().find(|r| (r.0 - e).abs() < 1e-9).unwrap().1;
    let best = rows.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let accs: Vec<String> = rows.iter().map(|r| format!("{:.1}", 100.0 * r.1)).collect();
    outcome(
        acc(0.4) - acc(0.0) >= 0.05 && (0.3 - 1e-9..=0.5 + 1e-9).contains(&best) && el < Duration::from_secs(300),
        format!("accuracy [{}] %, argmax eps {best}, {}", accs.join(", "), secs(el)),
    )
}

/// Criteria 7 and 8 share the pretrained state per scribble ratio.
fn segmentation() -> (Outcome, Outcome) {
    let t = Instant::now();
    let config = TrainConfig::default();
    let spec = DatasetSpec::default();
    let mut ordering_ok = true;
    let mut parts = Vec::new();
    let mut lambda_outcome = None;
    for ratio in [0.0, 0.5, 1.0] {
        let ds = generate(&spec, ratio).expect("dataset");
        let mut pre = TrainState::for_dataset(&ds, config.seed).expect("model");
        pretrain_pce(&mut pre, &ds, config.pretrain_epochs, &config).expect("pretraining");
        let score = |c: &TrainConfig| run_from(&pre, &ds, c).expect("training").1.expect("val split");
        let with = |m: Method| TrainConfig {
            method: m,
            ..config.clone()
        };
        let tr = score(&with(Method::GridTr));
        let gd = score(&with(Method::GridGd));
        let pce = score(&with(Method::PceGd));
        ordering_ok &= tr > gd && gd >= pce && tr - pce >= 0.03;
        parts.push(format!("r={ratio}: tr {tr:.3} gd {gd:.3} pce {pce:.3}"));

        if ratio == 1.0 {
            let lam = |l: f64| {
                score(&TrainConfig {
                    lambda: l,
                    ..with(Method::GridTr)
                })
            };
            let (zero, huge) = (lam(0.0), lam(1e6 * config.lambda));
            lambda_outcome = Some(outcome(
                tr > zero && tr > huge,
                format!(
                    "r=1: lambda 0 {zero:.3}, lambda* {} {tr:.3}, 1e6*lambda* {huge:.3}",
                    config.lambda
                ),
            ));
        }
    }
    let el = t.elapsed();
    (
        outcome(
            ordering_ok && el < Duration::from_secs(1800),
            format!("{}, {}", parts.join("; "), secs(el)),
        ),
        lambda_outcome.expect("ratio 1 evaluated"),
    )
}

fn invariants() -> Outcome {
    let reports = [
        verify::stage_a_suite(50, 0).expect("suite runs"),
        verify::lambda_limits_suite(50, 0).expect("suite runs"),
        verify::pnm_suite(50, 0).expect("suite runs"),
        verify::miou_suite(50, 0).expect("suite runs"),
    ];
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let cases: usize = reports.iter().map(|r| r.cases).sum();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} suites, {cases} cases", reports.len())
        } else {
            failed.join("; ")
        },
    )
}

fn main() -> ExitCode {
    // cargo passes harness flags such as --nocapture; `--list` must not run anything
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let names = [
        "max-flow exactness",
        "alpha-expansion optimality",
        "chain-rule decomposition",
        "gradient checks",
        "robust-loss reductions",
        "noisy classification eps sweep",
        "method ordering",
        "lambda sweep",
        "invariant suites",
    ];
    let mut results: Vec<Option<Outcome>> = (0..9).map(|_| None).collect();
    let run = |i: usize, o: Outcome, results: &mut Vec<Option<Outcome>>| {
        println!(
            "criterion {} {}: {} ({})",
            i + 1,
            names[i],
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results[i] = Some(o);
    };
    run(0, maxflow(), &mut results);
    run(1, expansion(), &mut results);
    run(2, chain_rule(), &mut results);
    run(3, gradients(), &mut results);
    run(4, robust_reductions(), &mut results);
    run(5, noisy_classification(), &mut results);
    let (ordering, lambda) = segmentation();
    run(6, ordering, &mut results);
    run(7, lambda, &mut results);
    run(8, invariants(), &mut results);
    let failed = results.iter().filter(|o| !o.as_ref().unwrap().pass).count();
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
