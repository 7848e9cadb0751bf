//! Training loops: PCE pretraining, the gradient-descent baselines and the
//! alternating trust-region method (Stage A: CRF labeling near the network
//! output; Stage B: robust fitting of the network to that labeling).
//!
//! Each image's loss is divided by the number of pixels it sums over
//! (seed pixels for the seed term, all pixels otherwise) and a mini-batch
//! gradient is the mean over its images. Per-image gradients may be computed
//! in parallel; they are always reduced in batch order, so results do not
//! depend on the thread count.

mod chainrule;
mod config;
pub mod noisy_cls;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use chainrule::{verify_chainrule_decomposition, ChainRuleReport, DiffFn};
pub use config::{Method, TrainConfig, CONFIG_KEYS};

use crate::crf::{build_affinities, stage_a_solve, HardLabeling, PottsGrid, StageAOptions};
use crate::data::{Dataset, SegSample};
use crate::diffcore::{forward, predict_logits, sgd_step, LayerSpec, ModelParams, OptimizerState, Tape, Var};
use crate::losses::{bilinear_potts_grid, mixed_robust_kl, pce, LogProbs, NoiseModel, SoftSegmentation};
use crate::metrics::{dataset_miou, ConfusionMatrix};
use crate::{Error, Result};

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// `pretrain` or a method name.
    pub phase: String,
    pub train_loss: f64,
    /// Mean Stage-A objective of the most recent solve (grid-tr only).
    pub stage_a_energy: Option<f64>,
    pub val_miou: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,method,train_loss,stage_a_energy,val_miou";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        writeln!(
            out,
            "{},{},{:.8},{},{}",
            r.epoch,
            r.phase,
            r.train_loss,
            opt(r.stage_a_energy),
            opt(r.val_miou)
        )
        .unwrap();
    }
    out
}

/// Per-image record of one Stage-A solve.
#[derive(Clone, Debug, PartialEq)]
pub struct StageARecord {
    pub round: usize,
    pub image: usize,
    pub initial_energy: f64,
    pub energy: f64,
    pub warm_start: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    /// Latest Stage-A labeling per training image.
    pub cached: Vec<Option<HardLabeling>>,
    pub epoch: usize,
    pub history: Vec<HistoryRow>,
    pub stage_a_log: Vec<StageARecord>,
    /// Every Stage-A round's labelings, kept only when requested.
    pub keep_proposals: bool,
    pub proposals: Vec<Vec<HardLabeling>>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            optimizer: None,
            cached: Vec::new(),
            epoch: 0,
            history: Vec::new(),
            stage_a_log: Vec::new(),
            keep_proposals: false,
            proposals: Vec::new(),
        }
    }

    /// Freshly initialised micro-net for `dataset`.
    pub fn for_dataset(dataset: &Dataset, seed: u64) -> Result<Self> {
        let spec = LayerSpec::micro(dataset.in_channels(), dataset.classes);
        Ok(Self::new(ModelParams::init(spec, seed)?))
    }
}

/// Argmax labeling of the network on one image.
pub fn predict(params: &ModelParams, image: &crate::diffcore::Tensor) -> Result<HardLabeling> {
    Ok(SoftSegmentation::from_logits(&predict_logits(params, image)?)?.argmax())
}

/// Dataset-level mIoU (one confusion matrix over all samples).
pub fn evaluate(params: &ModelParams, samples: &[SegSample], classes: usize) -> Result<f64> {
    let pairs = samples
        .par_iter()
        .map(|s| Ok((predict(params, &s.image)?, s.gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    dataset_miou(&pairs, classes)
}

/// Confusion matrix of the network over `samples`.
pub fn confusion(params: &ModelParams, samples: &[SegSample], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in samples {
        cm.accumulate(&predict(params, &s.image)?, &s.gt, None)?;
    }
    Ok(cm)
}

enum Objective<'a> {
    Pce,
    PcePotts { nu: f64, crfs: &'a [PottsGrid<f64>] },
    Robust { labels: &'a [HardLabeling], noise: NoiseModel },
}

/// Normalised loss of one image on `tape`; `None` when the image has no
/// term (no seeds under a seed-only objective).
fn image_loss(
    tape: &mut Tape,
    q: &LogProbs,
    sample: &SegSample,
    index: usize,
    objective: &Objective<'_>,
) -> Result<Option<Var>> {
    let pixels = sample.gt.len() as f64;
    match objective {
        Objective::Pce | Objective::PcePotts { .. } => {
            let seeds = sample.seeds.seed_count();
            if seeds == 0 {
                return Ok(None);
            }
            let p = pce(tape, q, &sample.seeds)?;
            let mut loss = tape.scale(p, 1.0 / seeds as f64)?;
            if let Objective::PcePotts { nu, crfs } = objective {
                if *nu != 0.0 {
                    let b = bilinear_potts_grid(tape, q, &crfs[index])?;
                    let b = tape.scale(b, nu / pixels)?;
                    loss = tape.add(loss, b)?;
                }
            }
            Ok(Some(loss))
        }
        Objective::Robust { labels, noise } => {
            let l = mixed_robust_kl(tape, q, &labels[index], &sample.seeds, noise)?;
            Ok(Some(tape.scale(l, 1.0 / pixels)?))
        }
    }
}

fn image_grad(
    params: &ModelParams,
    sample: &SegSample,
    index: usize,
    objective: &Objective<'_>,
) -> Result<Option<(f64, Vec<f64>)>> {
    let mut tape = Tape::new();
    let (logits, vars) = forward(&mut tape, params, &sample.image)?;
    let q = LogProbs::from_logits(&mut tape, logits)?;
    let Some(loss) = image_loss(&mut tape, &q, sample, index, objective)? else {
        return Ok(None);
    };
    tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.param_count());
    for (&v, t) in vars.iter().zip(params.tensors()) {
        match tape.grad(v) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    Ok(Some((tape.scalar(loss), flat)))
}

/// Mean loss over the images that contributed to the step.
fn batch_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    train: &[SegSample],
    batch: &[usize],
    objective: &Objective<'_>,
) -> Result<Option<f64>> {
    let results = batch
        .par_iter()
        .map(|&i| image_grad(params, &train[i], i, objective))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; params.param_count()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for (l, g) in results.into_iter().flatten() {
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v;
        }
        loss += l;
        n += 1;
    }
    if n == 0 {
        // nothing to fit in this batch; the schedule still advances
        opt.step += 1;
        return Ok(None);
    }
    params.set_flat_grads(&sum, 1.0 / n as f64)?;
    sgd_step(params, opt)?;
    Ok(Some(loss / n as f64))
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn epoch_order(seed: u64, stream: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn run_epoch(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    train: &[SegSample],
    config: &TrainConfig,
    stream: u64,
    epoch: usize,
    objective: &Objective<'_>,
) -> Result<f64> {
    let order = epoch_order(config.seed, stream, epoch, train.len());
    let mut total = 0.0;
    let mut count = 0;
    for batch in order.chunks(config.batch_size) {
        if let Some(l) = batch_step(params, opt, train, batch, objective)? {
            total += l;
            count += 1;
        }
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

fn check_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    config.validate(dataset.classes)
}

fn val_score(params: &ModelParams, dataset: &Dataset) -> Result<Option<f64>> {
    if dataset.val.is_empty() {
        Ok(None)
    } else {
        evaluate(params, &dataset.val, dataset.classes).map(Some)
    }
}

/// Mean per-seed PCE over the training images that have seeds.
pub fn mean_pce(params: &ModelParams, train: &[SegSample]) -> Result<f64> {
    let vals = train
        .par_iter()
        .map(|s| {
            if s.seeds.seed_count() == 0 {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let vars = params.register_frozen(&mut tape)?;
            let x = tape.constant(s.image.clone())?;
            let logits = crate::diffcore::forward_vars(&mut tape, params.spec(), &vars, x)?;
            let q = LogProbs::from_logits(&mut tape, logits)?;
            let p = pce(&mut tape, &q, &s.seeds)?;
            Ok(Some(tape.scalar(p) / s.seeds.seed_count() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let vals: Vec<f64> = vals.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(Error::InvalidArgument("no training image has seeds".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `(initial, final)` mean per-seed PCE of a pretraining run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// SGD on the seed loss with its own polynomial schedule.
pub fn pretrain_pce(
    state: &mut TrainState,
    dataset: &Dataset,
    epochs: usize,
    config: &TrainConfig,
) -> Result<PretrainReport> {
    check_dataset(dataset, config)?;
    let initial_loss = mean_pce(&state.params, &dataset.train)?;
    if epochs == 0 {
        return Ok(PretrainReport {
            initial_loss,
            final_loss: initial_loss,
        });
    }
    let total = epochs * batches_per_epoch(dataset.train.len(), config.batch_size);
    let mut opt = OptimizerState::new(config.lr, config.momentum, config.power, total)?;
    for e in 0..epochs {
        let loss = run_epoch(&mut state.params, &mut opt, &dataset.train, config, 1, e, &Objective::Pce)?;
        state.history.push(HistoryRow {
            epoch: e,
            phase: "pretrain".into(),
            train_loss: loss,
            stage_a_energy: None,
            val_miou: val_score(&state.params, dataset)?,
        });
    }
    Ok(PretrainReport {
        initial_loss,
        final_loss: mean_pce(&state.params, &dataset.train)?,
    })
}

fn main_optimizer(dataset: &Dataset, config: &TrainConfig) -> Result<OptimizerState> {
    let total = config.epochs * batches_per_epoch(dataset.train.len(), config.batch_size);
    OptimizerState::new(config.lr, config.momentum, config.power, total.max(1))
}

/// Affinity grids of the training images.
pub fn training_crfs(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<PottsGrid<f64>>> {
    dataset
        .train
        .iter()
        .map(|s| build_affinities(&s.image, config.sigma_color, config.w_scale, dataset.classes))
        .collect()
}

/// pce-gd, or grid-gd with the relaxed Potts term weighted by `nu`.
pub fn train_baseline(state: &mut TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    check_dataset(dataset, config)?;
    let crfs;
    let objective = match config.method {
        Method::PceGd => Objective::Pce,
        Method::GridGd => {
            crfs = training_crfs(dataset, config)?;
            Objective::PcePotts {
                nu: config.nu,
                crfs: &crfs,
            }
        }
        Method::GridTr => return Err(Error::Config("grid-tr is not a baseline".into())),
    };
    if config.epochs == 0 {
        return Ok(());
    }
    let mut opt = main_optimizer(dataset, config)?;
    for e in 0..config.epochs {
        let loss = run_epoch(&mut state.params, &mut opt, &dataset.train, config, 2, e, &objective)?;
        state.epoch += 1;
        state.history.push(HistoryRow {
            epoch: e,
            phase: config.method.to_string(),
            train_loss: loss,
            stage_a_energy: None,
            val_miou: val_score(&state.params, dataset)?,
        });
    }
    state.optimizer = Some(opt);
    Ok(())
}

/// Solves Stage A for every training image against the current network and
/// refreshes the cache. Returns the mean objective.
pub fn stage_a_round(
    state: &mut TrainState,
    dataset: &Dataset,
    crfs: &[PottsGrid<f64>],
    config: &TrainConfig,
    round: usize,
) -> Result<f64> {
    if state.cached.len() != dataset.train.len() {
        state.cached = vec![None; dataset.train.len()];
    }
    let params = &state.params;
    let cached = &state.cached;
    let outs = dataset
        .train
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let q = SoftSegmentation::from_logits(&predict_logits(params, &s.image)?)?;
            // with lambda = 0 the subproblem ignores the network, so it is
            // always started from the same constant labeling
            let init = if config.lambda == 0.0 { None } else { cached[i].as_ref() };
            let opts = StageAOptions {
                lambda: config.lambda,
                max_sweeps: config.max_sweeps,
                init,
                allowed: None,
            };
            let out = stage_a_solve(&crfs[i], &q, &s.seeds, &opts)?;
            Ok((out, init.is_some()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut round_labels = Vec::new();
    for (i, (out, warm)) in outs.into_iter().enumerate() {
        if out.energy > out.initial_energy + 1e-9 * (1.0 + out.initial_energy.abs()) {
            return Err(Error::Infeasible(format!(
                "Stage A increased the objective on image {i}: {} -> {}",
                out.initial_energy, out.energy
            )));
        }
        if !dataset.train[i].seeds.satisfied_by(&out.labeling) {
            return Err(Error::Infeasible(format!("Stage A moved a seed on image {i}")));
        }
        total += out.energy;
        state.stage_a_log.push(StageARecord {
            round,
            image: i,
            initial_energy: out.initial_energy,
            energy: out.energy,
            warm_start: warm,
        });
        if state.keep_proposals {
            round_labels.push(out.labeling.clone());
        }
        state.cached[i] = Some(out.labeling);
    }
    if state.keep_proposals {
        state.proposals.push(round_labels);
    }
    Ok(total / dataset.train.len() as f64)
}

/// The trust-region loop: Stage A every `m` epochs, Stage B (robust loss
/// against the cached labelings) every epoch, one momentum optimizer and
/// learning-rate schedule for the whole run.
pub fn train_grid_tr(state: &mut TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    check_dataset(dataset, config)?;
    let crfs = training_crfs(dataset, config)?;
    let noise = NoiseModel::new(config.epsilon, dataset.classes)?;
    let mut opt = main_optimizer(dataset, config)?;
    let mut energy = None;
    let mut labels: Vec<HardLabeling> = Vec::new();
    for e in 0..config.epochs {
        if e % config.m == 0 {
            energy = Some(stage_a_round(state, dataset, &crfs, config, e / config.m)?);
            labels = state.cached.iter().map(|c| c.clone().expect("filled by Stage A")).collect();
        }
        let objective = Objective::Robust {
            labels: &labels,
            noise,
        };
        let loss = run_epoch(&mut state.params, &mut opt, &dataset.train, config, 3, e, &objective)?;
        state.epoch += 1;
        state.history.push(HistoryRow {
            epoch: e,
            phase: Method::GridTr.to_string(),
            train_loss: loss,
            stage_a_energy: energy,
            val_miou: val_score(&state.params, dataset)?,
        });
    }
    state.optimizer = Some(opt);
    Ok(())
}

/// Main phase for `config.method`.
pub fn train(state: &mut TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    match config.method {
        Method::GridTr => train_grid_tr(state, dataset, config),
        _ => train_baseline(state, dataset, config),
    }
}

/// Fresh model, PCE pretraining and the main phase; returns the state and
/// the final validation mIoU.
pub fn run(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainState, Option<f64>)> {
    let mut state = TrainState::for_dataset(dataset, config.seed)?;
    pretrain_pce(&mut state, dataset, config.pretrain_epochs, config)?;
    train(&mut state, dataset, config)?;
    let score = val_score(&state.params, dataset)?;
    Ok((state, score))
}

/// Main phase from an already pretrained state (shared between methods).
pub fn run_from(pretrained: &TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<(TrainState, Option<f64>)> {
    let mut state = pretrained.clone();
    train(&mut state, dataset, config)?;
    let score = val_score(&state.params, dataset)?;
    Ok((state, score))
}
