//! Trust-region labeling subproblem:
//!
//! `argmin_s  lambda * sum_i -log q_i(s_i) + sum_ij w_ij [s_i != s_j]`
//!
//! over hard labelings that respect the seeds, with labels restricted to
//! those present in the seeds. The first term is `lambda * KL(s || q)` for
//! one-hot `s`.

use super::{alpha_expansion, HardLabeling, Label, PartialLabeling, PottsGrid};
use crate::diffcore::PROB_FLOOR;
use crate::losses::SoftSegmentation;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct StageAOptions<'a> {
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Warm start. When absent: argmax of `q` for `lambda > 0`, a constant
    /// labeling for `lambda == 0` (so the result cannot depend on `q`).
    pub init: Option<&'a HardLabeling>,
    /// Explicit label set; default is the labels present in the seeds (all
    /// labels if there are no seeds).
    pub allowed: Option<&'a [Label]>,
}

impl Default for StageAOptions<'_> {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_sweeps: 5,
            init: None,
            allowed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageA<T> {
    pub labeling: HardLabeling,
    /// Objective of the returned labeling.
    pub energy: T,
    /// Objective of the (projected) initial labeling.
    pub initial_energy: T,
    pub sweeps: usize,
    pub converged: bool,
}

/// `lambda * sum_i -log max(q_i(s_i), floor)`.
fn unaries<T: Real>(q: &SoftSegmentation, lambda: f64) -> Vec<T> {
    q.probs()
        .iter()
        .map(|&p| T::lit(lambda * -(p.max(PROB_FLOOR)).ln()))
        .collect()
}

fn problem<T: Real>(
    base: &PottsGrid<T>,
    q: &SoftSegmentation,
    seeds: &PartialLabeling,
    lambda: f64,
    allowed: Option<&[Label]>,
) -> Result<PottsGrid<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if q.height() != base.height() || q.width() != base.width() || q.classes() != base.num_labels() {
        return Err(Error::Shape(format!(
            "soft segmentation {}x{}x{} vs grid {}x{}x{}",
            q.height(),
            q.width(),
            q.classes(),
            base.height(),
            base.width(),
            base.num_labels()
        )));
    }
    let mut crf = base.clone();
    crf.set_unaries(unaries(q, lambda))?;
    let allowed = match allowed {
        Some(a) => a.to_vec(),
        None => {
            let present = seeds.present_labels();
            if present.is_empty() {
                (0..base.num_labels() as Label).collect()
            } else {
                present
            }
        }
    };
    crf.set_allowed(allowed)?;
    crf.set_seeds(seeds)?;
    Ok(crf)
}

/// Stage-A objective of `s`; `+inf` if `s` violates a seed or the label set.
pub fn stage_a_objective<T: Real>(
    base: &PottsGrid<T>,
    q: &SoftSegmentation,
    seeds: &PartialLabeling,
    lambda: f64,
    s: &HardLabeling,
) -> Result<T> {
    problem(base, q, seeds, lambda, None)?.energy(s)
}

/// Projects a labeling onto the feasible set: seeds are imposed and
/// disallowed labels replaced by the most probable allowed label.
fn project(crf: &PottsGrid<impl Real>, q: &SoftSegmentation, s: &HardLabeling) -> HardLabeling {
    let allowed = crf.allowed_labels();
    let labels = s
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| match crf.seeds()[i] {
            Some(y) => y,
            None if allowed.contains(&l) => l,
            None => best_allowed(q, i, allowed),
        })
        .collect();
    HardLabeling::new(s.height(), s.width(), labels).expect("valid labels")
}

fn best_allowed(q: &SoftSegmentation, pixel: usize, allowed: &[Label]) -> Label {
    let mut best = allowed[0];
    for &l in &allowed[1..] {
        if q.prob(pixel, l as usize) > q.prob(pixel, best as usize) {
            best = l;
        }
    }
    best
}

pub fn stage_a_solve<T: Real>(
    base: &PottsGrid<T>,
    q: &SoftSegmentation,
    seeds: &PartialLabeling,
    options: &StageAOptions<'_>,
) -> Result<StageA<T>> {
    let crf = problem(base, q, seeds, options.lambda, options.allowed)?;
    let init = match options.init {
        Some(s) => {
            crf.check_labeling(s)?;
            project(&crf, q, s)
        }
        None if options.lambda == 0.0 => {
            let first = crf.allowed_labels()[0];
            let constant = HardLabeling::constant(crf.height(), crf.width(), first)?;
            project(&crf, q, &constant)
        }
        None => project(&crf, q, &q.argmax()),
    };
    let initial_energy = crf.energy(&init)?;
    let out = alpha_expansion(&crf, &init, options.max_sweeps)?;
    Ok(StageA {
        labeling: out.labeling,
        energy: out.energy,
        initial_energy,
        sweeps: out.sweeps,
        converged: out.converged,
    })
}
