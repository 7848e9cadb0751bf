//! Segmentation objectives on the tape and their plain-value counterparts.
//!
//! All losses are sums over pixels (no averaging). Probabilities enter as
//! row-wise log-probabilities so that cross-entropy terms need no clamping;
//! logs of derived probabilities are floored at [`PROB_FLOOR`].

use crate::crf::{HardLabeling, PartialLabeling, PottsGrid};
use crate::diffcore::{softmax_rows, NllTerm, Tape, Tensor, Var, PROB_FLOOR};
use crate::{Error, Result};

/// Per-pixel categorical distributions, `[H * W, K]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSegmentation {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl SoftSegmentation {
    /// Validates that each row is non-negative and sums to one within 1e-9.
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 || probs.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "{} probabilities for {height}x{width}x{classes}",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} is not a distribution")));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    /// Softmax over the channel axis of `[H, W, K]` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 || s[2] == 0 {
            return Err(Error::Shape(format!("expected [H, W, K] logits, got {s:?}")));
        }
        let mut probs = logits.data().to_vec();
        softmax_rows(&mut probs, s[2]);
        Ok(Self {
            height: s[0],
            width: s[1],
            classes: s[2],
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, pixel: usize, class: usize) -> f64 {
        self.probs[pixel * self.classes + class]
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.probs[pixel * self.classes..(pixel + 1) * self.classes]
    }

    /// Most probable class per pixel (lowest index on ties).
    pub fn argmax(&self) -> HardLabeling {
        let labels = self
            .probs
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        HardLabeling::new(self.height, self.width, labels).expect("class count fits in a label")
    }
}

/// Network output on the tape as `[H * W, K]` log-probabilities.
#[derive(Clone, Copy, Debug)]
pub struct LogProbs {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl LogProbs {
    /// Log-softmax of `[H, W, K]` (or `[N, K]`, read as `N x 1`) logits.
    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self> {
        let shape = tape.value(logits).shape().to_vec();
        let (height, width, classes) = match shape.as_slice() {
            [h, w, k] => (*h, *w, *k),
            [n, k] => (*n, 1, *k),
            _ => return Err(Error::Shape(format!("logits of shape {shape:?}"))),
        };
        let flat = tape.reshape(logits, vec![height * width, classes])?;
        let var = tape.log_softmax(flat)?;
        Ok(Self {
            var,
            height,
            width,
            classes,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Probabilities `exp(log p)` as a new tape variable.
    pub fn probs(&self, tape: &mut Tape) -> Result<Var> {
        tape.exp(self.var)
    }

    /// Current values as a plain soft segmentation.
    pub fn to_soft(&self, tape: &Tape) -> Result<SoftSegmentation> {
        let probs = tape.value(self.var).data().iter().map(|v| v.exp()).collect();
        SoftSegmentation::new(self.height, self.width, self.classes, probs)
    }

    fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "labels {height}x{width} vs prediction {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: u8) -> Result<usize> {
        let l = label as usize;
        if l < self.classes {
            Ok(l)
        } else {
            Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.classes
            )))
        }
    }
}

/// Uniform label-flip model: with probability `epsilon` the observed label
/// is replaced by one of the other `K - 1` labels uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    epsilon: f64,
    classes: usize,
}

impl NoiseModel {
    pub fn new(epsilon: f64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("noise model needs at least two classes".into()));
        }
        let limit = (classes - 1) as f64 / classes as f64;
        if !(0.0..limit).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!(
                "outlier probability {epsilon} outside [0, {limit})"
            )));
        }
        Ok(Self { epsilon, classes })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Probability of observing one specific wrong label.
    pub fn a(&self) -> f64 {
        self.epsilon / (self.classes - 1) as f64
    }

    /// `1 - K a`; observed-label probability is `a + b q`.
    pub fn b(&self) -> f64 {
        1.0 - self.classes as f64 * self.a()
    }

    pub fn transition(&self) -> TransitionMatrix {
        TransitionMatrix::uniform(self.epsilon, self.classes).expect("valid by construction")
    }
}

/// Row-stochastic `T[l][k] = P(observed k | true l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(classes: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != classes * classes {
            return Err(Error::Shape(format!("{} entries for {classes} classes", entries.len())));
        }
        for (l, row) in entries.chunks(classes).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {l} has a negative entry")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {l} does not sum to one")));
            }
        }
        Ok(Self { classes, entries })
    }

    pub fn identity(classes: usize) -> Self {
        let mut e = vec![0.0; classes * classes];
        for k in 0..classes {
            e[k * classes + k] = 1.0;
        }
        Self { classes, entries: e }
    }

    /// `(1 - eps) I + eps / (K - 1) (11^T - I)`.
    pub fn uniform(epsilon: f64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let off = epsilon / (classes - 1) as f64;
        let mut e = vec![off; classes * classes];
        for k in 0..classes {
            e[k * classes + k] = 1.0 - epsilon;
        }
        Self::new(classes, e)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.classes + to]
    }
}

fn nll_terms(
    q: &LogProbs,
    labels: &HardLabeling,
    mut floor_scale: impl FnMut(usize) -> (f64, f64),
) -> Result<Vec<NllTerm>> {
    q.check_dims(labels.height(), labels.width())?;
    labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (floor, scale) = floor_scale(i);
            Ok(NllTerm {
                row: i,
                label: q.check_label(l)?,
                floor,
                scale,
            })
        })
        .collect()
}

/// Partial cross-entropy `-sum_{seeds} log q_i(y_i)`.
pub fn pce(tape: &mut Tape, q: &LogProbs, seeds: &PartialLabeling) -> Result<Var> {
    q.check_dims(seeds.height(), seeds.width())?;
    let terms = seeds
        .seeds()
        .map(|(i, l)| {
            Ok(NllTerm {
                row: i,
                label: q.check_label(l)?,
                floor: 0.0,
                scale: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if terms.is_empty() {
        return Err(Error::InvalidArgument("partial cross-entropy with no seed pixels".into()));
    }
    tape.floored_nll(q.var, terms)
}

/// Cross-entropy over every pixel.
pub fn cross_entropy(tape: &mut Tape, q: &LogProbs, labels: &HardLabeling) -> Result<Var> {
    let terms = nll_terms(q, labels, |_| (0.0, 1.0))?;
    tape.floored_nll(q.var, terms)
}

/// Robust cross-entropy `sum_i -log(a + b q_i(y_i))`.
pub fn robust_ce(tape: &mut Tape, q: &LogProbs, labels: &HardLabeling, noise: &NoiseModel) -> Result<Var> {
    check_noise(q, noise)?;
    let (a, b) = (noise.a(), noise.b());
    let terms = nll_terms(q, labels, |_| (a, b))?;
    tape.floored_nll(q.var, terms)
}

/// Forward-corrected cross-entropy `sum_i -log (T^T q_i)(y_i)`.
pub fn forward_corrected_ce(
    tape: &mut Tape,
    q: &LogProbs,
    labels: &HardLabeling,
    transition: &TransitionMatrix,
) -> Result<Var> {
    q.check_dims(labels.height(), labels.width())?;
    if transition.classes() != q.classes {
        return Err(Error::Shape("transition matrix size differs from class count".into()));
    }
    let picks = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| Ok((i, q.check_label(l)?)))
        .collect::<Result<Vec<_>>>()?;
    tape.corrected_nll(q.var, transition.entries().to_vec(), picks)
}

/// Robust term over non-seed pixels plus plain cross-entropy over seeds,
/// which are trusted.
pub fn mixed_robust_kl(
    tape: &mut Tape,
    q: &LogProbs,
    labels: &HardLabeling,
    seeds: &PartialLabeling,
    noise: &NoiseModel,
) -> Result<Var> {
    check_noise(q, noise)?;
    q.check_dims(seeds.height(), seeds.width())?;
    let (a, b) = (noise.a(), noise.b());
    let seed_map = seeds.labels();
    let terms = nll_terms(q, labels, |i| if seed_map[i].is_some() { (0.0, 1.0) } else { (a, b) })?;
    tape.floored_nll(q.var, terms)
}

/// Bilinear relaxation of the Potts term on the CRF's 8-grid:
/// `sum_{ij} w_ij (1 - <q_i, q_j>)`, which equals the Potts penalty on
/// one-hot inputs.
pub fn bilinear_potts_grid(tape: &mut Tape, q: &LogProbs, crf: &PottsGrid<f64>) -> Result<Var> {
    q.check_dims(crf.height(), crf.width())?;
    let probs = q.probs(tape)?;
    let pairs = crf.pairs().iter().map(|p| (p.a, p.b, p.weight)).collect();
    tape.bilinear_potts(probs, pairs)
}

fn check_noise(q: &LogProbs, noise: &NoiseModel) -> Result<()> {
    if noise.classes() != q.classes {
        return Err(Error::InvalidArgument(format!(
            "noise model for {} classes used with {}",
            noise.classes(),
            q.classes
        )));
    }
    Ok(())
}

/// `KL(p || q)` for one-hot `p`: `-sum_i log max(q_i(p_i), floor)`.
pub fn kl_onehot(p: &HardLabeling, q: &SoftSegmentation) -> Result<f64> {
    if p.height() != q.height() || p.width() != q.width() {
        return Err(Error::Shape("labeling and soft segmentation differ in size".into()));
    }
    p.labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < q.classes() {
                Ok(-q.prob(i, l as usize).max(PROB_FLOOR).ln())
            } else {
                Err(Error::InvalidArgument(format!("label {l} out of range")))
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_var(tape: &mut Tape, h: usize, w: usize, k: usize, data: Vec<f64>) -> LogProbs {
        let v = tape.param(Tensor::new(vec![h, w, k], data).unwrap()).unwrap();
        LogProbs::from_logits(tape, v).unwrap()
    }

    #[test]
    fn pce_trivial_values() {
        // one seed at probability 1/2
        let mut tape = Tape::new();
        let q = logits_var(&mut tape, 1, 2, 2, vec![0.0, 0.0, 5.0, -1.0]);
        let mut seeds = PartialLabeling::empty(1, 2);
        seeds.set(0, Some(1));
        let v = pce(&mut tape, &q, &seeds).unwrap();
        assert!((tape.scalar(v) - std::f64::consts::LN_2).abs() < 1e-15);

        // confident and correct -> 0 (up to exp(-800))
        let mut tape = Tape::new();
        let q = logits_var(&mut tape, 1, 1, 2, vec![800.0, 0.0]);
        let mut seeds = PartialLabeling::empty(1, 1);
        seeds.set(0, Some(0));
        let v = pce(&mut tape, &q, &seeds).unwrap();
        assert_eq!(tape.scalar(v), 0.0);

        let seeds = PartialLabeling::empty(1, 1);
        assert!(pce(&mut tape, &q, &seeds).is_err());
    }

    #[test]
    fn robust_ce_floor_value() {
        // K = 2, eps = 0.2: a = 0.2, b = 0.6, q(y) -> 0
        let noise = NoiseModel::new(0.2, 2).unwrap();
        assert!((noise.a() - 0.2).abs() < 1e-15);
        assert!((noise.b() - 0.6).abs() < 1e-15);
        let mut tape = Tape::new();
        let q = logits_var(&mut tape, 1, 1, 2, vec![-700.0, 0.0]);
        let labels = HardLabeling::new(1, 1, vec![0]).unwrap();
        let v = robust_ce(&mut tape, &q, &labels, &noise).unwrap();
        assert!((tape.scalar(v) + 0.2f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&mut tape, &q, &labels).unwrap();
        assert!(tape.scalar(ce) > 600.0);
    }

    #[test]
    fn noise_model_range() {
        assert!(NoiseModel::new(0.5, 2).is_err());
        assert!(NoiseModel::new(-0.1, 3).is_err());
        assert!(NoiseModel::new(0.6, 3).is_ok());
        assert!(NoiseModel::new(0.1, 1).is_err());
    }

    #[test]
    fn transition_validation() {
        assert!(TransitionMatrix::new(2, vec![0.5, 0.5, 0.2, 0.7]).is_err());
        assert!(TransitionMatrix::new(2, vec![1.5, -0.5, 0.0, 1.0]).is_err());
        let t = TransitionMatrix::uniform(0.4, 10).unwrap();
        assert!((t.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((t.get(0, 3) - 0.4 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn zero_corrected_probability_is_an_error() {
        // column 1 of T is all zero: label 1 can never be observed
        let t = TransitionMatrix::new(2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let q = logits_var(&mut tape, 1, 1, 2, vec![0.0, 1.0]);
        let labels = HardLabeling::new(1, 1, vec![1]).unwrap();
        assert!(forward_corrected_ce(&mut tape, &q, &labels, &t).is_err());
    }

    #[test]
    fn kl_onehot_cases() {
        let q = SoftSegmentation::new(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(kl_onehot(&q.argmax(), &q).unwrap(), 0.0);
        let k = 4;
        let u = SoftSegmentation::new(2, 3, k, vec![0.25; 24]).unwrap();
        let p = HardLabeling::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        assert!((kl_onehot(&p, &u).unwrap() - 6.0 * 4f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut probs = Vec::new();
        for _ in 0..6 {
            let r: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = r.iter().sum();
            probs.extend(r.iter().map(|v| v / s));
        }
        let q = SoftSegmentation::new(2, 3, 3, probs.clone()).unwrap();
        let p = HardLabeling::new(2, 3, vec![2, 0, 1, 1, 0, 2]).unwrap();
        let mut oracle = 0.0;
        for i in 0..6 {
            oracle -= probs[i * 3 + p.labels()[i] as usize].ln();
        }
        assert!((kl_onehot(&p, &q).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn soft_segmentation_validation() {
        assert!(SoftSegmentation::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(SoftSegmentation::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(SoftSegmentation::new(1, 1, 2, vec![0.5]).is_err());
    }
}
