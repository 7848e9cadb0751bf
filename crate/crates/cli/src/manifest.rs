//! Plain-text run manifests.
//!
//! A manifest is a list of `key = value` lines. Training hyperparameters use
//! the [`TrainConfig`] keys, so a manifest can be passed back as `--config`
//! to repeat a run; `run_id`, `command`, `out` and `time.*` lines are
//! informational and ignored on input.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use rtr_core::trainer::TrainConfig;

/// Settings a config file may carry besides the [`TrainConfig`] keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSettings {
    pub data: Option<PathBuf>,
    pub scribble_ratio: Option<f64>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: TrainConfig,
    pub settings: RunSettings,
    pub out: PathBuf,
    /// `(phase, seconds)` in execution order.
    pub timings: Vec<(String, f64)>,
}

/// Seven hex digits derived from the command, its settings and the clock.
pub fn run_id(command: &str, config: &TrainConfig) -> String {
    let mut h = DefaultHasher::new();
    command.hash(&mut h);
    config.to_text().hash(&mut h);
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default()
        .hash(&mut h);
    format!("{:07x}", h.finish() & 0xfff_ffff)
}

impl RunManifest {
    pub fn new(command: &str, config: TrainConfig, settings: RunSettings, out: PathBuf) -> Self {
        Self {
            run_id: run_id(command, &config),
            command: command.to_string(),
            config,
            settings,
            out,
            timings: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "run_id = {}", self.run_id).unwrap();
        writeln!(s, "command = {}", self.command).unwrap();
        writeln!(s, "out = {}", self.out.display()).unwrap();
        if let Some(d) = &self.settings.data {
            writeln!(s, "data = {}", d.display()).unwrap();
        }
        if let Some(r) = self.settings.scribble_ratio {
            writeln!(s, "scribble_ratio = {r}").unwrap();
        }
        if let Some(t) = self.settings.threads {
            writeln!(s, "threads = {t}").unwrap();
        }
        s.push_str(&self.config.to_text());
        for (phase, secs) in &self.timings {
            writeln!(s, "time.{phase} = {secs:.3}").unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Applies a `key = value` file: run settings go to `settings`, everything
/// else must be a [`TrainConfig`] key.
pub fn apply_config_text(text: &str, config: &mut TrainConfig, settings: &mut RunSettings) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", n + 1);
        };
        let (key, value) = (key.trim().replace('-', "_"), value.trim());
        match key.as_str() {
            "run_id" | "command" | "out" => {}
            k if k.starts_with("time.") => {}
            "data" => settings.data = Some(PathBuf::from(value)),
            "scribble_ratio" => {
                settings.scribble_ratio = Some(value.parse().with_context(|| format!("config line {}", n + 1))?)
            }
            "threads" => settings.threads = Some(value.parse().with_context(|| format!("config line {}", n + 1))?),
            _ => config.set(&key, value).with_context(|| format!("config line {}", n + 1))?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_a_valid_config() {
        let config = TrainConfig {
            lambda: 0.37,
            seed: 9,
            ..Default::default()
        };
        let settings = RunSettings {
            data: Some("d".into()),
            scribble_ratio: Some(0.5),
            threads: Some(1),
        };
        let mut m = RunManifest::new("train", config.clone(), settings.clone(), "o".into());
        m.timings.push(("train".into(), 1.5));
        let (mut c, mut s) = (TrainConfig::default(), RunSettings::default());
        apply_config_text(&m.to_text(), &mut c, &mut s).unwrap();
        assert_eq!(c, config);
        assert_eq!(s, settings);
        assert_eq!(m.run_id.len(), 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (mut c, mut s) = (TrainConfig::default(), RunSettings::default());
        assert!(apply_config_text("bogus = 1", &mut c, &mut s).is_err());
        assert!(apply_config_text("lambda 1", &mut c, &mut s).is_err());
    }
}
