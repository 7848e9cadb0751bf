//! Classification under uniform label noise: a one-hidden-layer MLP trained
//! with the robust loss at several outlier probabilities, scored on clean
//! test labels.
//!
//! The default budget is short on purpose. Long training lets the network
//! memorise the noise at small outlier probabilities, while a very flat loss
//! (large outlier probability) learns slowly; with a few epochs both effects
//! are visible. Scores are averaged over `repeats` independent draws of data
//! and initialisation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::crf::HardLabeling;
use crate::data::{gen_noisy_cls, BlobConfig, NoisyClsSample};
use crate::diffcore::{OptimizerState, Tape, Tensor};
use crate::losses::{robust_ce, LogProbs, NoiseModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClsConfig {
    pub blobs: BlobConfig,
    pub train: usize,
    pub test: usize,
    pub corruption: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for NoisyClsConfig {
    fn default() -> Self {
        Self {
            blobs: BlobConfig::default(),
            train: 1000,
            test: 2000,
            corruption: 0.5,
            hidden: 128,
            epochs: 5,
            batch_size: 50,
            lr: 0.05,
            momentum: 0.9,
            repeats: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Mlp {
    fn init(dim: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n1 = he(dim);
        let n2 = he(hidden);
        Ok(Self {
            w1: Tensor::from_fn(vec![dim, hidden], |_| n1.sample(rng))?,
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::from_fn(vec![hidden, classes], |_| n2.sample(rng))?,
            b2: Tensor::zeros(vec![classes]),
        })
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Logits `[B, K]`.
    fn logits(&self, tape: &mut Tape, x: Tensor, train: bool) -> Result<(crate::diffcore::Var, Vec<crate::diffcore::Var>)> {
        let vars = self
            .tensors()
            .iter()
            .map(|t| if train { tape.param((*t).clone()) } else { tape.constant((*t).clone()) })
            .collect::<Result<Vec<_>>>()?;
        let x = tape.constant(x)?;
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row_bias(h, vars[1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, vars[2])?;
        Ok((tape.add_row_bias(o, vars[3])?, vars))
    }
}

fn features(samples: &[NoisyClsSample], idx: &[usize]) -> Result<Tensor> {
    let d = samples[0].features.len();
    let data = idx.iter().flat_map(|&i| samples[i].features.iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data)
}

fn accuracy(mlp: &Mlp, samples: &[NoisyClsSample]) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut tape = Tape::new();
    let (logits, _) = mlp.logits(&mut tape, features(samples, &idx)?, false)?;
    let k = tape.value(logits).shape()[1];
    let correct = tape
        .value(logits)
        .data()
        .chunks(k)
        .zip(samples)
        .filter(|(row, s)| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == s.label as usize
        })
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean clean test accuracy after training on corrupted labels with
/// outlier probability `epsilon`.
pub fn train_and_score(cfg: &NoisyClsConfig, epsilon: f64) -> Result<f64> {
    Ok(epsilon_sweep(cfg, &[epsilon])?[0].1)
}

fn splits(cfg: &NoisyClsConfig, seed: u64) -> Result<(Vec<NoisyClsSample>, Vec<NoisyClsSample>)> {
    if cfg.train == 0 || cfg.test == 0 || cfg.batch_size == 0 || cfg.repeats == 0 {
        return Err(Error::Config("train, test, batch sizes and repeats must be positive".into()));
    }
    let train = gen_noisy_cls(cfg.train, &cfg.blobs, cfg.corruption, seed, seed.wrapping_add(1))?;
    let test = gen_noisy_cls(cfg.test, &cfg.blobs, 0.0, seed, seed.wrapping_add(2))?;
    Ok((train, test))
}

fn train_and_score_on(
    cfg: &NoisyClsConfig,
    train: &[NoisyClsSample],
    test: &[NoisyClsSample],
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    let k = cfg.blobs.classes;
    let noise = NoiseModel::new(epsilon, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut mlp = Mlp::init(cfg.blobs.dim, cfg.hidden, k, &mut rng)?;
    let steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let sched = OptimizerState::new(cfg.lr, cfg.momentum, 0.9, steps.max(1))?;
    let mut velocity: Vec<Vec<f64>> = mlp.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (logits, vars) = mlp.logits(&mut tape, features(train, batch)?, true)?;
            let q = LogProbs::from_logits(&mut tape, logits)?;
            let observed = batch.iter().map(|&i| train[i].observed).collect();
            let labels = HardLabeling::new(batch.len(), 1, observed)?;
            let l = robust_ce(&mut tape, &q, &labels, &noise)?;
            let l = tape.scale(l, 1.0 / batch.len() as f64)?;
            tape.backward(l)?;
            let rate = sched.rate_at(step);
            for ((t, v), var) in mlp.tensors_mut().into_iter().zip(&mut velocity).zip(vars) {
                let g = tape.grad(var).expect("parameter gradient");
                let data = t.data_mut();
                for j in 0..data.len() {
                    v[j] = cfg.momentum * v[j] + g[j];
                    data[j] -= rate * v[j];
                }
            }
            step += 1;
        }
    }
    accuracy(&mlp, test)
}

/// `(epsilon, mean clean test accuracy)` for each value. Repeat `r` uses
/// seed `cfg.seed + r` for data and initialisation, shared by all values.
pub fn epsilon_sweep(cfg: &NoisyClsConfig, epsilons: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut sums = vec![0.0; epsilons.len()];
    for r in 0..cfg.repeats {
        let seed = cfg.seed.wrapping_add(r as u64);
        let (train, test) = splits(cfg, seed)?;
        for (s, &e) in sums.iter_mut().zip(epsilons) {
            *s += train_and_score_on(cfg, &train, &test, e, seed)?;
        }
    }
    Ok(epsilons
        .iter()
        .zip(sums)
        .map(|(&e, s)| (e, s / cfg.repeats as f64))
        .collect())
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("epsilon,accuracy\n");
    for (e, a) in rows {
        out.push_str(&format!("{e},{a:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_labels_are_learned() {
        let cfg = NoisyClsConfig {
            train: 200,
            test: 200,
            corruption: 0.0,
            epochs: 20,
            hidden: 16,
            repeats: 1,
            ..Default::default()
        };
        assert!(train_and_score(&cfg, 0.0).unwrap() > 0.8);
    }
}
