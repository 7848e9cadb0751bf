use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rtr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtr"))
        .args(args)
        .env("RTR_OUT_ROOT", root.join("runs"))
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen_small(root: &Path) -> String {
    let data = root.join("data");
    let data = data.to_str().unwrap().to_string();
    ok(rtr(
        root,
        &["gen-data", "--out", &data, "--n", "3", "--val", "2", "--size", "16", "16", "--classes", "3", "--seed", "1"],
    ));
    data
}

const QUICK: [&str; 6] = ["--epochs", "1", "--pretrain-epochs", "1", "--batch-size", "2"];

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = gen_small(root);
    assert!(Path::new(&data).join("manifest.txt").exists());

    let run = root.join("train");
    let mut args = vec!["train", "--data", &data, "--method", "grid-tr", "--out", run.to_str().unwrap()];
    args.extend(QUICK);
    ok(rtr(root, &args));
    for f in ["model.ckpt", "history.csv", "metrics.csv", "per_class.csv", "stage_a.csv", "manifest.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,miou\n"));

    // the manifest reruns its own job
    let rerun = root.join("rerun");
    ok(rtr(
        root,
        &["train", "--config", run.join("manifest.txt").to_str().unwrap(), "--out", rerun.to_str().unwrap()],
    ));
    assert_eq!(metrics, fs::read_to_string(rerun.join("metrics.csv")).unwrap());

    let ev = root.join("eval");
    ok(rtr(
        root,
        &[
            "eval",
            "--data",
            &data,
            "--checkpoint",
            run.join("model.ckpt").to_str().unwrap(),
            "--trimaps",
            "1,3",
            "--out",
            ev.to_str().unwrap(),
        ],
    ));
    let bands = fs::read_to_string(ev.join("bands.csv")).unwrap();
    assert_eq!(bands.lines().count(), 3, "{bands}");
    let val = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .find(|l| l.starts_with("val,"))
            .unwrap()
            .to_string()
    };
    assert_eq!(val(&ev.join("metrics.csv")), val(&run.join("metrics.csv")));
}

#[test]
fn zero_nu_grid_gd_reproduces_pce_gd() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = gen_small(root);
    let metrics = |method: &str, name: &str| {
        let out = root.join(name);
        let mut args = vec!["train", "--data", &data, "--method", method, "--nu", "0", "--out", out.to_str().unwrap()];
        args.extend(QUICK);
        ok(rtr(root, &args));
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(metrics("pce-gd", "a"), metrics("grid-gd", "b"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = gen_small(root);
    let out = root.join("sweep");
    let mut args = vec![
        "sweep",
        "--param",
        "lambda",
        "--values",
        "0,0.1,1",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(QUICK);
    ok(rtr(root, &args));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,miou");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,"));
    assert!(out.join("sweep.svg").exists() && out.join("manifest.txt").exists());
}

#[test]
fn default_output_goes_under_out_root() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = gen_small(root);
    let mut args = vec!["train", "--data", &data];
    args.extend(QUICK);
    ok(rtr(root, &args));
    let runs: Vec<_> = fs::read_dir(root.join("runs")).unwrap().collect();
    assert!(!runs.is_empty());
}

#[test]
fn noisy_cls_writes_accuracy_per_epsilon() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = root.join("ncls");
    ok(rtr(
        root,
        &["noisy-cls", "--epsilon-values", "0,0.4", "--repeats", "1", "--epochs", "1", "--out", out.to_str().unwrap()],
    ));
    let csv = fs::read_to_string(out.join("noisy_cls.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn verify_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(rtr(tmp.path(), &["verify"]));
    assert!(stdout.contains("all suites passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn bad_arguments_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert!(!rtr(root, &["train", "--no-such-flag"]).status.success());
    assert!(!rtr(root, &["train", "--method", "sgd"]).status.success());
    let missing = rtr(root, &["train", "--data", root.join("absent").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}
