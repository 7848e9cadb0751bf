use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    PceGd,
    GridGd,
    GridTr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PceGd, Method::GridGd, Method::GridTr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PceGd => "pce-gd",
            Method::GridGd => "grid-gd",
            Method::GridTr => "grid-tr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (pce-gd, grid-gd, grid-tr)")))
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Trust-region multiplier of the Stage-A proximity term.
    pub lambda: f64,
    /// Outlier probability of the Stage-B robust loss.
    pub epsilon: f64,
    /// Weight of the relaxed Potts term for grid-gd.
    pub nu: f64,
    /// Stage-B epochs per Stage-A solve.
    pub m: usize,
    pub lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs after pretraining; identical for every method.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub sigma_color: f64,
    pub w_scale: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::GridTr,
            lambda: 0.1,
            epsilon: 0.1,
            nu: 0.3,
            m: 5,
            lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            batch_size: 4,
            epochs: 20,
            pretrain_epochs: 30,
            sigma_color: 0.15,
            w_scale: 2.0,
            max_sweeps: 5,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "method",
    "lambda",
    "epsilon",
    "nu",
    "m",
    "lr",
    "power",
    "momentum",
    "batch_size",
    "epochs",
    "pretrain_epochs",
    "sigma_color",
    "w_scale",
    "max_sweeps",
    "seed",
];

impl TrainConfig {
    /// Sets one field from its textual form; keys as in [`CONFIG_KEYS`]
    /// (dashes are accepted in place of underscores).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        match key.as_str() {
            "method" => self.method = value.parse()?,
            "lambda" => self.lambda = f()?,
            "epsilon" => self.epsilon = f()?,
            "nu" => self.nu = f()?,
            "m" => self.m = u()?,
            "lr" => self.lr = f()?,
            "power" => self.power = f()?,
            "momentum" => self.momentum = f()?,
            "batch_size" => self.batch_size = u()?,
            "epochs" => self.epochs = u()?,
            "pretrain_epochs" => self.pretrain_epochs = u()?,
            "sigma_color" => self.sigma_color = f()?,
            "w_scale" => self.w_scale = f()?,
            "max_sweeps" => self.max_sweeps = u()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key.replace('-', "_").as_str() {
            "method" => self.method.to_string(),
            "lambda" => self.lambda.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "nu" => self.nu.to_string(),
            "m" => self.m.to_string(),
            "lr" => self.lr.to_string(),
            "power" => self.power.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "sigma_color" => self.sigma_color.to_string(),
            "w_scale" => self.w_scale.to_string(),
            "max_sweeps" => self.max_sweeps.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// `key value` lines in [`CONFIG_KEYS`] order; floats print with full
    /// round-trip precision.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Checks ranges; `classes` bounds the outlier probability.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("lambda", self.lambda)?;
        nonneg("nu", self.nu)?;
        nonneg("lr", self.lr)?;
        nonneg("power", self.power)?;
        nonneg("w_scale", self.w_scale)?;
        let limit = (classes.max(2) - 1) as f64 / classes.max(2) as f64;
        if !(0.0..limit).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, {limit})", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.sigma_color > 0.0) {
            return Err(Error::Config("sigma_color must be positive".into()));
        }
        if self.m == 0 || self.batch_size == 0 || self.max_sweeps == 0 {
            return Err(Error::Config("m, batch_size and max_sweeps must be >= 1".into()));
        }
        Ok(())
    }
}
