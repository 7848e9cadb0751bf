//! Gaussian-blob classification data with uniform label corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClsSample {
    pub features: Vec<f64>,
    pub label: u8,
    pub observed: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobConfig {
    pub dim: usize,
    pub classes: usize,
    /// Scale of the class centres.
    pub separation: f64,
    /// Per-feature standard deviation around a centre.
    pub spread: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            classes: 10,
            separation: 1.0,
            spread: 1.0,
        }
    }
}

/// Class centres drawn from `seed`; shared by every split generated with
/// the same `centre_seed`.
pub fn blob_centres(cfg: &BlobConfig, centre_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(centre_seed);
    (0..cfg.classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| cfg.separation * gauss(&mut rng))
                .collect()
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Keeps the label with probability `1 - rate`, otherwise draws one of the
/// other `K - 1` labels uniformly.
pub fn corrupt(rng: &mut impl Rng, label: u8, classes: usize, rate: f64) -> u8 {
    if rate > 0.0 && rng.gen_bool(rate) {
        let r = rng.gen_range(0..classes - 1) as u8;
        if r >= label {
            r + 1
        } else {
            r
        }
    } else {
        label
    }
}

/// `n` samples with balanced true labels (`i mod K`).
pub fn gen_noisy_cls(
    n: usize,
    cfg: &BlobConfig,
    corruption_rate: f64,
    centre_seed: u64,
    seed: u64,
) -> Result<Vec<NoisyClsSample>> {
    if !(0.0..1.0).contains(&corruption_rate) {
        return Err(Error::InvalidArgument(format!(
            "corruption rate {corruption_rate} outside [0, 1)"
        )));
    }
    if cfg.classes < 2 || cfg.classes > 255 || cfg.dim == 0 {
        return Err(Error::Config("need 2..=255 classes and a positive dimension".into()));
    }
    let centres = blob_centres(cfg, centre_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let label = (i % cfg.classes) as u8;
            let features = centres[label as usize]
                .iter()
                .map(|&c| c + cfg.spread * gauss(&mut rng))
                .collect();
            let observed = corrupt(&mut rng, label, cfg.classes, corruption_rate);
            NoisyClsSample {
                features,
                label,
                observed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_labels() {
        let s = gen_noisy_cls(200, &BlobConfig::default(), 0.0, 1, 2).unwrap();
        assert!(s.iter().all(|s| s.label == s.observed));
    }

    #[test]
    fn corruption_frequency_and_uniformity() {
        let n = 10_000;
        let s = gen_noisy_cls(n, &BlobConfig::default(), 0.5, 1, 3).unwrap();
        let wrong: Vec<_> = s.iter().filter(|s| s.label != s.observed).collect();
        let frac = wrong.len() as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
        // offset (observed - true) mod K is uniform over 1..K
        let mut hist = [0f64; 9];
        for s in &wrong {
            hist[((s.observed as usize + 10 - s.label as usize) % 10) - 1] += 1.0;
        }
        let e = wrong.len() as f64 / 9.0;
        let chi2: f64 = hist.iter().map(|o| (o - e).powi(2) / e).sum();
        // 8 degrees of freedom, 0.999 quantile
        assert!(chi2 < 26.12, "{chi2}");
    }

    #[test]
    fn bad_rate() {
        assert!(gen_noisy_cls(1, &BlobConfig::default(), 1.0, 0, 0).is_err());
    }
}
