//! End-to-end behaviour through the public API on small synthetic data.

use rtr_core::crf::{build_affinities, stage_a_solve, HardLabeling, PartialLabeling, StageAOptions};
use rtr_core::data::{generate, read_dataset, write_dataset, DatasetSpec, SceneConfig};
use rtr_core::diffcore::{Tape, Tensor};
use rtr_core::losses::SoftSegmentation;
use rtr_core::metrics::{miou, trimap_miou};
use rtr_core::trainer::{pretrain_pce, predict, run, run_from, Method, TrainConfig, TrainState};

fn small_spec(train: usize, val: usize) -> DatasetSpec {
    DatasetSpec {
        scene: SceneConfig {
            height: 16,
            width: 16,
            classes: 3,
            ..SceneConfig::default()
        },
        train,
        val,
        seed: 3,
    }
}

fn quick(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        pretrain_epochs: 2,
        m: 1,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn softmax_of_three_one_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![3.0, 1.0, 0.0]).unwrap()).unwrap();
    let p = tape.softmax(x).unwrap();
    let z = 3f64.exp() + 1f64.exp() + 1.0;
    let want = [3f64.exp() / z, 1f64.exp() / z, 1.0 / z];
    for (got, want) in tape.value(p).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
    assert!((want[0] - 0.843_794_6).abs() < 1e-6);
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let ds = generate(&small_spec(2, 0), 1.0).unwrap();
    let config = quick(Method::PceGd);
    let mut state = TrainState::for_dataset(&ds, 1).unwrap();
    let before = state.params.clone();
    pretrain_pce(&mut state, &ds, 0, &config).unwrap();
    assert_eq!(state.params, before);
}

#[test]
fn pretraining_overfits_one_image() {
    let ds = generate(&small_spec(1, 0), 1.0).unwrap();
    let config = TrainConfig {
        batch_size: 1,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let mut state = TrainState::for_dataset(&ds, 0).unwrap();
    let report = pretrain_pce(&mut state, &ds, 300, &config).unwrap();
    assert!(report.final_loss < report.initial_loss);
    let sample = &ds.train[0];
    let pred = predict(&state.params, &sample.image).unwrap();
    let (hit, total) = sample
        .seeds
        .seeds()
        .fold((0, 0), |(h, t), (i, l)| (h + usize::from(pred.labels()[i] == l), t + 1));
    assert_eq!(hit, total, "seed accuracy {hit}/{total}");
}

#[test]
fn zero_nu_grid_gd_matches_pce_gd_bitwise() {
    let ds = generate(&small_spec(3, 2), 0.5).unwrap();
    let (pce, pce_score) = run(&ds, &quick(Method::PceGd)).unwrap();
    let gd_config = TrainConfig {
        nu: 0.0,
        ..quick(Method::GridGd)
    };
    let (gd, gd_score) = run(&ds, &gd_config).unwrap();
    assert_eq!(pce.params, gd.params);
    assert_eq!(pce_score.map(f64::to_bits), gd_score.map(f64::to_bits));
    let losses = |s: &TrainState| s.history.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&pce), losses(&gd));
}

#[test]
fn training_is_reproducible() {
    let ds = generate(&small_spec(3, 2), 1.0).unwrap();
    let a = run(&ds, &quick(Method::GridTr)).unwrap();
    let b = run(&ds, &quick(Method::GridTr)).unwrap();
    assert_eq!(a.0.params, b.0.params);
    assert_eq!(a.1, b.1);
}

#[test]
fn shared_pretraining_equals_full_run() {
    let ds = generate(&small_spec(3, 2), 1.0).unwrap();
    let config = quick(Method::GridTr);
    let mut pre = TrainState::for_dataset(&ds, config.seed).unwrap();
    pretrain_pce(&mut pre, &ds, config.pretrain_epochs, &config).unwrap();
    let shared = run_from(&pre, &ds, &config).unwrap();
    let full = run(&ds, &config).unwrap();
    assert_eq!(shared.0.params, full.0.params);
}

#[test]
fn zero_lambda_proposal_ignores_network() {
    let ds = generate(&small_spec(1, 0), 1.0).unwrap();
    let sample = &ds.train[0];
    let crf = build_affinities(&sample.image, 0.15, 2.0, 3).unwrap();
    let n = sample.gt.len();
    let q_a = SoftSegmentation::new(16, 16, 3, (0..n).flat_map(|_| [0.8, 0.1, 0.1]).collect()).unwrap();
    let q_b = SoftSegmentation::new(16, 16, 3, (0..n).flat_map(|_| [0.1, 0.1, 0.8]).collect()).unwrap();
    let options = StageAOptions {
        lambda: 0.0,
        ..StageAOptions::default()
    };
    let a = stage_a_solve(&crf, &q_a, &sample.seeds, &options).unwrap();
    let b = stage_a_solve(&crf, &q_b, &sample.seeds, &options).unwrap();
    assert_eq!(a.labeling, b.labeling);
    assert!(sample.seeds.satisfied_by(&a.labeling));
}

#[test]
fn dataset_round_trips_through_disk() {
    let spec = small_spec(2, 1);
    let dir = std::env::temp_dir().join(format!("rtr-scenario-{}", std::process::id()));
    write_dataset(&dir, &spec).unwrap();
    for ratio in [0.0, 0.5, 1.0] {
        assert_eq!(read_dataset(&dir, ratio).unwrap(), generate(&spec, ratio).unwrap());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn trimap_two_class_hand_case() {
    // left half 0, right half 1 on 8x8; width-1 band is the two columns at the seam
    let gt = HardLabeling::new(8, 8, (0..64).map(|i| u8::from(i % 8 >= 4)).collect()).unwrap();
    // prediction moves the seam one column right
    let pred = HardLabeling::new(8, 8, (0..64).map(|i| u8::from(i % 8 >= 5)).collect()).unwrap();
    let bands = trimap_miou(&pred, &gt, &[1, 100]).unwrap();
    // band: columns 3 and 4; class 0 IoU 8/16, class 1 IoU 0/8
    assert!((bands[0].miou.unwrap() - 0.25).abs() < 1e-12, "{:?}", bands[0]);
    assert_eq!(bands[0].pixels, 16);
    let whole = miou(&pred, &gt, None).unwrap();
    assert!((bands[1].miou.unwrap() - whole).abs() < 1e-12);
    assert!((whole - (32.0 / 40.0 + 24.0 / 32.0) / 2.0).abs() < 1e-12);
}

#[test]
fn empty_seeds_are_accepted() {
    let ds = generate(&small_spec(1, 0), 1.0).unwrap();
    let sample = &ds.train[0];
    let crf = build_affinities(&sample.image, 0.15, 2.0, 3).unwrap();
    let q = SoftSegmentation::new(16, 16, 3, vec![1.0 / 3.0; 16 * 16 * 3]).unwrap();
    let r = stage_a_solve(&crf, &q, &PartialLabeling::empty(16, 16), &StageAOptions::default()).unwrap();
    assert!(r.energy <= r.initial_energy);
}
