use proptest::prelude::*;

use rtr_core::crf::{alpha_expansion, brute_force_minimum, HardLabeling, PottsGrid};
use rtr_core::diffcore::{Tape, Tensor};
use rtr_core::losses::{bilinear_potts_grid, LogProbs, SoftSegmentation};
use rtr_core::maxflow::{brute_force_min_cut, Algorithm, Graph};
use rtr_core::metrics::{miou, trimap_miou};

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, i64, i64)>, Vec<(i64, i64)>)> {
    (1usize..7).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..n, 0i64..10, 0i64..10), 0..14),
            prop::collection::vec((0i64..10, 0i64..10), n),
        )
    })
}

fn build(n: usize, edges: &[(usize, usize, i64, i64)], terminals: &[(i64, i64)]) -> Graph<i64> {
    let mut g = Graph::new();
    g.add_nodes(n);
    for &(u, v, a, b) in edges {
        if u != v {
            g.add_edge(u, v, a, b).unwrap();
        }
    }
    for (u, &(s, t)) in terminals.iter().enumerate() {
        g.add_terminal_weights(u, s, t).unwrap();
    }
    g
}

fn potts_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<i32>, Vec<i32>)> {
    (1usize..4, 1usize..4, 2usize..4).prop_flat_map(|(h, w, k)| {
        (
            Just(h),
            Just(w),
            Just(k),
            prop::collection::vec(0i32..10, h * w * k),
            prop::collection::vec(0i32..5, 4 * h * w),
        )
    })
}

fn potts(h: usize, w: usize, k: usize, unary: &[i32], weights: &[i32]) -> PottsGrid<f64> {
    let mut crf = PottsGrid::new(h, w, k).unwrap();
    crf.set_unaries(unary.iter().map(|&u| u as f64).collect()).unwrap();
    let mut next = weights.iter();
    crf.set_weights(|_, _| *next.next().unwrap() as f64).unwrap();
    crf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn max_flow_equals_min_cut((n, edges, terminals) in graph_strategy()) {
        let (best, _) = brute_force_min_cut(&build(n, &edges, &terminals));
        for algorithm in [Algorithm::BoykovKolmogorov, Algorithm::EdmondsKarp] {
            let mut g = build(n, &edges, &terminals);
            let flow = g.solve_with(algorithm).unwrap();
            prop_assert_eq!(flow, best);
            let sides = g.cut().unwrap().to_vec();
            prop_assert_eq!(g.cut_capacity(&sides), flow);
            g.check_invariants(0).unwrap();
        }
    }

    #[test]
    fn expansion_is_monotone_and_bounded((h, w, k, unary, weights) in potts_strategy()) {
        let crf = potts(h, w, k, &unary, &weights);
        let init = HardLabeling::constant(h, w, 0).unwrap();
        let r = alpha_expansion(&crf, &init, 50).unwrap();
        prop_assert!(r.trace.windows(2).all(|p| p[1] < p[0]));
        prop_assert_eq!(r.energy, crf.energy(&r.labeling).unwrap());
        let (_, optimum) = brute_force_minimum(&crf).unwrap();
        prop_assert!(r.energy >= optimum);
        prop_assert!(r.energy <= 2.0 * optimum + 1e-9);
        if k == 2 {
            prop_assert_eq!(r.energy, optimum);
        }
    }

    #[test]
    fn relaxed_potts_is_tight_on_one_hot((h, w, k, unary, weights) in potts_strategy()) {
        let crf = potts(h, w, k, &unary, &weights);
        let labels: Vec<u8> = unary.chunks(k).map(|c| (c[0] as usize % k) as u8).collect();
        let s = HardLabeling::new(h, w, labels).unwrap();
        // log-probabilities of an (almost) one-hot labelling
        let logits = Tensor::from_fn(vec![h, w, k], |i| if s.labels()[i / k] as usize == i % k { 0.0 } else { -800.0 }).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(logits).unwrap();
        let q = LogProbs::from_logits(&mut tape, x).unwrap();
        let e = bilinear_potts_grid(&mut tape, &q, &crf).unwrap();
        prop_assert!((tape.scalar(e) - crf.pairwise_energy(&s)).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50.0f64..50.0, 12)) {
        let soft = SoftSegmentation::from_logits(&Tensor::new(vec![2, 2, 3], logits).unwrap()).unwrap();
        for p in 0..4 {
            let row = soft.row(p);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn miou_bounds_and_identity(gt in prop::collection::vec(0u8..3, 36), pred in prop::collection::vec(0u8..3, 36)) {
        let gt = HardLabeling::new(6, 6, gt).unwrap();
        let pred = HardLabeling::new(6, 6, pred).unwrap();
        let v = miou(&pred, &gt, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(miou(&gt, &gt, None).unwrap(), 1.0);
        let bands = trimap_miou(&pred, &gt, &[1, 2, 100]).unwrap();
        prop_assert!(bands.windows(2).all(|b| b[0].pixels <= b[1].pixels));
        if let Some(full) = bands[2].miou {
            prop_assert!((full - v).abs() < 1e-12);
        }
    }
}
