//! `rtr`: data generation, training, evaluation, sweeps and self-checks.

mod manifest;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rtr_core::data::{self, DatasetSpec, SceneConfig};
use rtr_core::diffcore::checkpoint;
use rtr_core::metrics::{bands_csv, dataset_trimap, per_class_csv};
use rtr_core::trainer::noisy_cls::{epsilon_sweep, sweep_csv, NoisyClsConfig};
use rtr_core::trainer::{self, history_csv, pretrain_pce, run_from, Method, TrainConfig, TrainState};
use rtr_core::verify;

use manifest::{apply_config_text, RunManifest, RunSettings};

/// Environment variable naming the default output root.
const OUT_ROOT_ENV: &str = "RTR_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "rtr", version, about = "Trust-region training for scribble-supervised segmentation")]
struct Cli {
    /// Worker threads for training and Stage A (1 = deterministic reference mode).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Default parent of output directories when --out is not given.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scribble dataset.
    GenData(GenDataArgs),
    /// Pretrain on scribbles, then train with one method.
    Train(TrainArgs),
    /// Score a checkpoint on the validation split, including boundary bands.
    Eval(EvalArgs),
    /// Train and evaluate once per value of one parameter.
    Sweep(SweepArgs),
    /// Outlier-probability sweep on synthetic noisy classification.
    NoisyCls(NoisyClsArgs),
    /// Run the oracle and invariant suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training images.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Validation images.
    #[arg(long, default_value_t = 10)]
    val: usize,
    /// Height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixel noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Stripe amplitude inside objects.
    #[arg(long)]
    texture: Option<f64>,
    /// Grey background patches per image.
    #[arg(long)]
    clutter: Option<usize>,
}

/// Training hyperparameters; unset flags fall back to the config file, then
/// to the defaults.
#[derive(Args, Debug, Default, Clone)]
struct TrainFlags {
    /// `key = value` file (a previous run's manifest.txt works).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    scribble_ratio: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: rtr_core::Error| e.to_string())
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Boundary band widths in pixels.
    #[arg(long, default_value = "1,2,4,8")]
    trimaps: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SweepParam {
    Lambda,
    Epsilon,
    Nu,
    ScribbleRatio,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Epsilon => "epsilon",
            SweepParam::Nu => "nu",
            SweepParam::ScribbleRatio => "scribble_ratio",
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NoisyClsArgs {
    #[arg(long, default_value_t = 0.5)]
    corruption: f64,
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8")]
    epsilon_values: String,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|_| anyhow::anyhow!("invalid {what} value {v:?}")))
        .collect()
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn output_dir(out: Option<PathBuf>, root: &Path, command: &str, run_id: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| root.join(format!("{command}-{run_id}")));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Defaults, then the config file, then explicit flags.
fn resolve(flags: &TrainFlags) -> Result<(TrainConfig, RunSettings)> {
    let mut config = TrainConfig::default();
    let mut settings = RunSettings::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        apply_config_text(&text, &mut config, &mut settings)?;
    }
    if let Some(d) = &flags.data {
        settings.data = Some(d.clone());
    }
    if let Some(r) = flags.scribble_ratio {
        settings.scribble_ratio = Some(r);
    }
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = flags.$f { config.$f = v; } )* };
    }
    over!(method, lambda, epsilon, nu, epochs, pretrain_epochs, m, lr, batch_size, seed);
    Ok((config, settings))
}

fn data_dir(settings: &RunSettings) -> Result<PathBuf> {
    let dir = settings.data.clone().context("no dataset given (--data or `data` in the config file)")?;
    ensure!(dir.join("manifest.txt").is_file(), "{} is not a dataset directory", dir.display());
    Ok(dir)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    ensure!(args.size.len() == 2, "--size takes H and W");
    let mut scene = SceneConfig {
        height: args.size[0],
        width: args.size[1],
        classes: args.classes,
        ..Default::default()
    };
    if let Some(v) = args.noise {
        scene.noise_std = v;
    }
    if let Some(v) = args.texture {
        scene.texture = v;
    }
    if let Some(v) = args.clutter {
        scene.clutter = v;
    }
    let spec = DatasetSpec {
        scene,
        train: args.n,
        val: args.val,
        seed: args.seed,
    };
    data::write_dataset(&args.out, &spec)?;
    println!("wrote {} train / {} val images to {}", spec.train, spec.val, args.out.display());
    Ok(())
}

/// Trains one model and writes checkpoint, history and metrics to `dir`.
fn train_into(config: &TrainConfig, dataset: &data::Dataset, dir: &Path, manifest: &mut RunManifest) -> Result<f64> {
    config.validate(dataset.classes)?;
    let t = Instant::now();
    let mut state = TrainState::for_dataset(dataset, config.seed)?;
    pretrain_pce(&mut state, dataset, config.pretrain_epochs, config)?;
    manifest.timings.push(("pretrain".into(), t.elapsed().as_secs_f64()));
    let t = Instant::now();
    trainer::train(&mut state, dataset, config)?;
    manifest.timings.push((config.method.to_string(), t.elapsed().as_secs_f64()));
    let score = finish(&state, dataset, dir)?;
    manifest.write(dir)?;
    Ok(score)
}

fn finish(state: &TrainState, dataset: &data::Dataset, dir: &Path) -> Result<f64> {
    checkpoint::save(&state.params, dir.join("model.ckpt"))?;
    write(dir, "history.csv", &history_csv(&state.history))?;
    let cm = trainer::confusion(&state.params, &dataset.val, dataset.classes)?;
    let score = cm.miou().context("validation split is empty")?;
    let train = trainer::evaluate(&state.params, &dataset.train, dataset.classes)?;
    write(dir, "metrics.csv", &format!("split,miou\ntrain,{train:.6}\nval,{score:.6}\n"))?;
    write(dir, "per_class.csv", &per_class_csv(&cm))?;
    if !state.stage_a_log.is_empty() {
        let mut s = String::from("round,image,initial_energy,energy,warm_start\n");
        for r in &state.stage_a_log {
            s.push_str(&format!(
                "{},{},{:.9},{:.9},{}\n",
                r.round, r.image, r.initial_energy, r.energy, r.warm_start
            ));
        }
        write(dir, "stage_a.csv", &s)?;
    }
    Ok(score)
}

fn train_cmd(args: TrainArgs, threads: Option<usize>, root: &Path) -> Result<()> {
    let (config, mut settings) = resolve(&args.flags)?;
    settings.threads = threads.or(settings.threads);
    set_threads(settings.threads)?;
    let data_dir = data_dir(&settings)?;
    let ratio = *settings.scribble_ratio.get_or_insert(1.0);
    let dataset = data::read_dataset(&data_dir, ratio)?;
    let mut manifest = RunManifest::new("train", config.clone(), settings, PathBuf::new());
    let dir = output_dir(args.out, root, "train", &manifest.run_id)?;
    manifest.out = dir.clone();
    let score = train_into(&config, &dataset, &dir, &mut manifest)?;
    println!("{} val mIoU {score:.4} -> {}", config.method, dir.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs, root: &Path) -> Result<()> {
    let widths: Vec<usize> = parse_list(&args.trimaps, "trimap width")?;
    let params = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let dataset = data::read_dataset(&args.data, 1.0)?;
    let mut pairs = Vec::with_capacity(dataset.val.len());
    for s in &dataset.val {
        pairs.push((trainer::predict(&params, &s.image)?, s.gt.clone()));
    }
    let bands = dataset_trimap(&pairs, dataset.classes, &widths)?;
    let cm = trainer::confusion(&params, &dataset.val, dataset.classes)?;
    let score = cm.miou().context("validation split is empty")?;
    let id = manifest::run_id("eval", &TrainConfig::default());
    let dir = output_dir(args.out, root, "eval", &id)?;
    write(&dir, "bands.csv", &bands_csv(&bands))?;
    write(&dir, "per_class.csv", &per_class_csv(&cm))?;
    write(&dir, "metrics.csv", &format!("split,miou\nval,{score:.6}\n"))?;
    println!("val mIoU {score:.4}");
    for b in &bands {
        match b.miou {
            Some(m) => println!("  band {:>2}px mIoU {m:.4} ({} px)", b.width, b.pixels),
            None => println!("  band {:>2}px NA", b.width),
        }
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs, threads: Option<usize>, root: &Path) -> Result<()> {
    let (config, mut settings) = resolve(&args.flags)?;
    settings.threads = threads.or(settings.threads);
    set_threads(settings.threads)?;
    let data_dir = data_dir(&settings)?;
    let values: Vec<f64> = parse_list(&args.values, args.param.name())?;
    ensure!(!values.is_empty(), "--values is empty");
    let base_ratio = settings.scribble_ratio.unwrap_or(1.0);
    let mut manifest = RunManifest::new(&format!("sweep {}", args.param.name()), config.clone(), settings, PathBuf::new());
    let dir = output_dir(args.out, root, "sweep", &manifest.run_id)?;
    manifest.out = dir.clone();

    let mut scores = Vec::with_capacity(values.len());
    // pretraining does not depend on lambda, epsilon or nu, so it is shared
    let mut shared: Option<(data::Dataset, TrainState)> = None;
    for (i, &v) in values.iter().enumerate() {
        let t = Instant::now();
        let mut c = config.clone();
        let sub = dir.join(format!("{i:02}"));
        fs::create_dir_all(&sub)?;
        let score = if args.param == SweepParam::ScribbleRatio {
            let ds = data::read_dataset(&data_dir, v)?;
            let mut m = RunManifest::new("train", c.clone(), manifest.settings.clone(), sub.clone());
            m.settings.scribble_ratio = Some(v);
            train_into(&c, &ds, &sub, &mut m)?
        } else {
            c.set(args.param.name(), &v.to_string())?;
            if shared.is_none() {
                let ds = data::read_dataset(&data_dir, base_ratio)?;
                c.validate(ds.classes)?;
                let mut st = TrainState::for_dataset(&ds, c.seed)?;
                pretrain_pce(&mut st, &ds, c.pretrain_epochs, &c)?;
                shared = Some((ds, st));
            }
            let (ds, st) = shared.as_ref().unwrap();
            c.validate(ds.classes)?;
            let (state, _) = run_from(st, ds, &c)?;
            let mut m = RunManifest::new("train", c.clone(), manifest.settings.clone(), sub.clone());
            m.timings.push((c.method.to_string(), t.elapsed().as_secs_f64()));
            m.write(&sub)?;
            finish(&state, ds, &sub)?
        };
        manifest.timings.push((format!("value{i:02}"), t.elapsed().as_secs_f64()));
        println!("{}={v} val mIoU {score:.4}", args.param.name());
        scores.push(score);
    }

    let mut csv = format!("{},miou\n", args.param.name());
    for (v, s) in values.iter().zip(&scores) {
        csv.push_str(&format!("{v},{s:.6}\n"));
    }
    write(&dir, "sweep.csv", &csv)?;
    let labels: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let title = format!("{} ({})", args.param.name(), config.method);
    write(&dir, "sweep.svg", &svg::line_chart(&title, args.param.name(), "val mIoU", &labels, &scores))?;
    manifest.write(&dir)?;
    println!("-> {}", dir.display());
    Ok(())
}

fn noisy_cls_cmd(args: NoisyClsArgs, threads: Option<usize>, root: &Path) -> Result<()> {
    set_threads(threads)?;
    let eps: Vec<f64> = parse_list(&args.epsilon_values, "epsilon")?;
    ensure!(!eps.is_empty(), "--epsilon-values is empty");
    let mut cfg = NoisyClsConfig {
        corruption: args.corruption,
        seed: args.seed,
        ..Default::default()
    };
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let limit = (cfg.blobs.classes - 1) as f64 / cfg.blobs.classes as f64;
    if let Some(bad) = eps.iter().find(|&&e| !(0.0..limit).contains(&e)) {
        bail!("epsilon {bad} outside [0, {limit}) for {} classes", cfg.blobs.classes);
    }
    let t = Instant::now();
    let rows = epsilon_sweep(&cfg, &eps)?;
    let id = manifest::run_id("noisy-cls", &TrainConfig::default());
    let dir = output_dir(args.out, root, "noisy-cls", &id)?;
    write(&dir, "noisy_cls.csv", &sweep_csv(&rows))?;
    let labels: Vec<String> = eps.iter().map(|v| v.to_string()).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let title = format!("clean test accuracy, {:.0}% corrupted labels", 100.0 * cfg.corruption);
    write(&dir, "noisy_cls.svg", &svg::line_chart(&title, "epsilon", "accuracy", &labels, &accs))?;
    write(
        &dir,
        "manifest.txt",
        &format!(
            "run_id = {id}\ncommand = noisy-cls\ncorruption = {}\nrepeats = {}\nepochs = {}\nseed = {}\ntime.sweep = {:.3}\n",
            cfg.corruption,
            cfg.repeats,
            cfg.epochs,
            cfg.seed,
            t.elapsed().as_secs_f64()
        ),
    )?;
    for (e, a) in &rows {
        println!("epsilon {e}: accuracy {:.2}%", 100.0 * a);
    }
    println!("-> {}", dir.display());
    Ok(())
}

fn verify_cmd(args: VerifyArgs, threads: Option<usize>) -> Result<bool> {
    set_threads(threads)?;
    let reports = verify::run_all(args.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("{}", if ok { "all suites passed" } else { "some suites FAILED" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.clone();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a, cli.threads, &root).map(|_| true),
        Command::Eval(a) => eval_cmd(a, &root).map(|_| true),
        Command::Sweep(a) => sweep_cmd(a, cli.threads, &root).map(|_| true),
        Command::NoisyCls(a) => noisy_cls_cmd(a, cli.threads, &root).map(|_| true),
        Command::Verify(a) => verify_cmd(a, cli.threads),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
