//! Grid Potts CRF: 8-connected pairwise affinities, unary tables, hard seed
//! constraints, energy evaluation, alpha-expansion and the trust-region
//! labeling subproblem.

mod expansion;
mod labeling;
mod stage_a;

pub use expansion::{alpha_expansion, brute_force_minimum, Expansion, MOVE_TOLERANCE};
pub use labeling::{HardLabeling, Label, PartialLabeling, UNLABELED};
pub use stage_a::{stage_a_objective, stage_a_solve, StageA, StageAOptions};

pub use crate::losses::SoftSegmentation;

use crate::diffcore::Tensor;
use crate::scalar::Real;
use crate::{Error, Result};

/// Offsets `(dy, dx)` covering each unordered 8-neighbour pair once.
pub const EIGHT_NEIGHBOURHOOD: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Unordered neighbouring pixel pair with affinity `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair<T> {
    pub a: usize,
    pub b: usize,
    pub weight: T,
}

/// Every unordered 8-connected pair `(a, b)` with `a < b` in a row-major grid.
pub fn grid_pairs(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(4 * height * width);
    for y in 0..height {
        for x in 0..width {
            for (dy, dx) in EIGHT_NEIGHBOURHOOD {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                out.push((y * width + x, ny as usize * width + nx as usize));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PottsGrid<T> {
    height: usize,
    width: usize,
    num_labels: usize,
    pairs: Vec<Pair<T>>,
    unary: Vec<T>,
    allowed: Vec<Label>,
    seeds: Vec<Option<Label>>,
}

impl<T: Real> PottsGrid<T> {
    /// Grid with zero unaries, zero affinities, all labels allowed, no seeds.
    pub fn new(height: usize, width: usize, num_labels: usize) -> Result<Self> {
        if num_labels == 0 || num_labels > UNLABELED as usize {
            return Err(Error::InvalidArgument(format!("unsupported label count {num_labels}")));
        }
        let pairs = grid_pairs(height, width)
            .into_iter()
            .map(|(a, b)| Pair { a, b, weight: T::zero() })
            .collect();
        Ok(Self {
            height,
            width,
            num_labels,
            pairs,
            unary: vec![T::zero(); height * width * num_labels],
            allowed: (0..num_labels as u8).collect(),
            seeds: vec![None; height * width],
        })
    }

    /// Contrast-sensitive affinities
    /// `w_ij = w_scale * exp(-|I_i - I_j|^2 / (2 sigma^2))` on the 8-grid of an
    /// `[H, W, C]` image.
    pub fn from_image(image: &Tensor, sigma: f64, w_scale: f64, num_labels: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("color sigma must be positive, got {sigma}")));
        }
        if !(w_scale >= 0.0 && w_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("affinity scale must be >= 0, got {w_scale}")));
        }
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected [H, W, C] image, got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut grid = Self::new(h, w, num_labels)?;
        let data = image.data();
        let denom = 2.0 * sigma * sigma;
        for p in &mut grid.pairs {
            let d2: f64 = (0..c)
                .map(|k| {
                    let d = data[p.a * c + k] - data[p.b * c + k];
                    d * d
                })
                .sum();
            p.weight = T::lit(w_scale * (-d2 / denom).exp());
        }
        Ok(grid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn pairs(&self) -> &[Pair<T>] {
        &self.pairs
    }

    pub fn allowed_labels(&self) -> &[Label] {
        &self.allowed
    }

    pub fn seeds(&self) -> &[Option<Label>] {
        &self.seeds
    }

    pub fn unary(&self, pixel: usize, label: Label) -> T {
        self.unary[pixel * self.num_labels + label as usize]
    }

    /// Overrides the affinity of every pair; `weight(a, b)` must be >= 0.
    pub fn set_weights(&mut self, mut weight: impl FnMut(usize, usize) -> T) -> Result<()> {
        for p in &mut self.pairs {
            let w = weight(p.a, p.b);
            if !w.is_valid_capacity() {
                return Err(Error::InvalidArgument(format!("affinity {w} between {} and {}", p.a, p.b)));
            }
            p.weight = w;
        }
        Ok(())
    }

    pub fn scale_weights(&mut self, factor: T) {
        for p in &mut self.pairs {
            p.weight = p.weight * factor;
        }
    }

    /// Replaces the unary table (`pixel * K + label` layout).
    pub fn set_unaries(&mut self, unary: Vec<T>) -> Result<()> {
        if unary.len() != self.unary.len() {
            return Err(Error::Shape(format!(
                "{} unary entries, expected {}",
                unary.len(),
                self.unary.len()
            )));
        }
        if let Some(bad) = unary.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("unary cost {bad}")));
        }
        self.unary = unary;
        Ok(())
    }

    pub fn set_allowed(&mut self, mut allowed: Vec<Label>) -> Result<()> {
        allowed.sort_unstable();
        allowed.dedup();
        if allowed.is_empty() {
            return Err(Error::Infeasible("empty allowed label set".into()));
        }
        if let Some(&bad) = allowed.iter().find(|&&l| l as usize >= self.num_labels) {
            return Err(Error::InvalidArgument(format!("allowed label {bad} out of range")));
        }
        if let Some(bad) = self.seeds.iter().flatten().find(|l| !allowed.contains(l)) {
            return Err(Error::Infeasible(format!("seed label {bad} outside the allowed set")));
        }
        self.allowed = allowed;
        Ok(())
    }

    pub fn set_seeds(&mut self, seeds: &PartialLabeling) -> Result<()> {
        if seeds.height() != self.height || seeds.width() != self.width {
            return Err(Error::Shape("seed map does not match the grid".into()));
        }
        if let Some((i, l)) = seeds.seeds().find(|(_, l)| !self.allowed.contains(l)) {
            return Err(Error::Infeasible(format!("seed label {l} at pixel {i} outside the allowed set")));
        }
        self.seeds = seeds.labels().to_vec();
        Ok(())
    }

    pub fn check_labeling(&self, s: &HardLabeling) -> Result<()> {
        if s.height() != self.height || s.width() != self.width {
            return Err(Error::Shape(format!(
                "labeling {}x{} vs grid {}x{}",
                s.height(),
                s.width(),
                self.height,
                self.width
            )));
        }
        if let Some(bad) = s.max_label().filter(|&l| l as usize >= self.num_labels) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        Ok(())
    }

    /// True when `s` respects every seed and uses only allowed labels.
    pub fn is_feasible(&self, s: &HardLabeling) -> bool {
        let mut allowed = [false; 256];
        for &l in &self.allowed {
            allowed[l as usize] = true;
        }
        s.labels()
            .iter()
            .zip(&self.seeds)
            .all(|(&l, seed)| allowed[l as usize] && seed.map_or(true, |y| y == l))
    }

    pub fn unary_energy(&self, s: &HardLabeling) -> T {
        let mut e = T::zero();
        for (i, &l) in s.labels().iter().enumerate() {
            e += self.unary(i, l);
        }
        e
    }

    pub fn pairwise_energy(&self, s: &HardLabeling) -> T {
        let labels = s.labels();
        let mut e = T::zero();
        for p in &self.pairs {
            if labels[p.a] != labels[p.b] {
                e += p.weight;
            }
        }
        e
    }

    /// Potts energy `sum_i U_i(s_i) + sum_{ij} w_ij [s_i != s_j]`; infeasible
    /// labelings (seed violations, disallowed labels) score `+inf`.
    pub fn energy(&self, s: &HardLabeling) -> Result<T> {
        self.check_labeling(s)?;
        if !self.is_feasible(s) {
            return Ok(T::infinity());
        }
        Ok(self.unary_energy(s) + self.pairwise_energy(s))
    }

    /// Per-pixel argmin of the unaries over allowed labels, honouring seeds.
    pub fn unary_argmin(&self) -> HardLabeling {
        let labels = (0..self.pixel_count())
            .map(|i| match self.seeds[i] {
                Some(y) => y,
                None => {
                    let mut best = self.allowed[0];
                    for &l in &self.allowed[1..] {
                        if self.unary(i, l) < self.unary(i, best) {
                            best = l;
                        }
                    }
                    best
                }
            })
            .collect();
        HardLabeling::new(self.height, self.width, labels).expect("valid labels")
    }
}

/// Free function form of [`PottsGrid::energy`].
pub fn potts_energy<T: Real>(crf: &PottsGrid<T>, s: &HardLabeling) -> Result<T> {
    crf.energy(s)
}

/// Free function form of [`PottsGrid::from_image`] with all labels allowed.
pub fn build_affinities(image: &Tensor, sigma: f64, w_scale: f64, num_labels: usize) -> Result<PottsGrid<f64>> {
    PottsGrid::from_image(image, sigma, w_scale, num_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_grid_pairs() {
        let pairs = grid_pairs(3, 3);
        // 3x3: 6 horizontal, 6 vertical, 4 + 4 diagonal
        assert_eq!(pairs.len(), 20);
        for (a, b) in pairs {
            let (ya, xa) = (a / 3, a % 3);
            let (yb, xb) = (b / 3, b % 3);
            let cheb = ya.abs_diff(yb).max(xa.abs_diff(xb));
            assert_eq!(cheb, 1);
            assert!(a < b);
        }
    }

    #[test]
    fn constant_image_affinity() {
        let img = Tensor::from_fn(vec![4, 5, 3], |_| 0.4).unwrap();
        let g = build_affinities(&img, 0.15, 2.0, 3).unwrap();
        assert!(g.pairs().iter().all(|p| p.weight == 2.0));
        let g = build_affinities(&img, 0.15, 0.0, 3).unwrap();
        assert!(g.pairs().iter().all(|p| p.weight == 0.0));
        assert!(build_affinities(&img, 0.0, 1.0, 3).is_err());
        assert!(build_affinities(&img, -1.0, 1.0, 3).is_err());
    }

    #[test]
    fn step_edge_affinity() {
        // left half color 0, right half color 1 (single channel)
        let img = Tensor::from_fn(vec![2, 4, 1], |i| if i % 4 >= 2 { 1.0 } else { 0.0 }).unwrap();
        let g = build_affinities(&img, 0.1, 3.0, 2).unwrap();
        let cross = 3.0 * (-50.0f64).exp();
        for p in g.pairs() {
            let crosses = (p.a % 4 >= 2) != (p.b % 4 >= 2);
            let expect = if crosses { cross } else { 3.0 };
            assert!((p.weight - expect).abs() <= 1e-15 * expect.max(1.0), "{p:?}");
        }
    }

    #[test]
    fn energies() {
        let g = PottsGrid::<f64>::new(3, 3, 2).unwrap();
        let s = HardLabeling::constant(3, 3, 1).unwrap();
        assert_eq!(g.energy(&s).unwrap(), 0.0);

        let mut g = PottsGrid::<f64>::new(1, 2, 2).unwrap();
        g.set_weights(|_, _| 3.0).unwrap();
        let s = HardLabeling::new(1, 2, vec![0, 1]).unwrap();
        assert_eq!(g.energy(&s).unwrap(), 3.0);

        let mut seeds = PartialLabeling::empty(1, 2);
        seeds.set(0, Some(1));
        g.set_seeds(&seeds).unwrap();
        assert_eq!(g.energy(&s).unwrap(), f64::INFINITY);

        let bad = HardLabeling::constant(2, 2, 0).unwrap();
        assert!(g.energy(&bad).is_err());
    }

    #[test]
    fn allowed_set_validation() {
        let mut g = PottsGrid::<f64>::new(2, 2, 3).unwrap();
        assert!(g.set_allowed(vec![]).is_err());
        let mut seeds = PartialLabeling::empty(2, 2);
        seeds.set(0, Some(2));
        g.set_seeds(&seeds).unwrap();
        assert!(matches!(g.set_allowed(vec![0, 1]), Err(Error::Infeasible(_))));
        g.set_allowed(vec![2, 0]).unwrap();
        assert_eq!(g.allowed_labels(), &[0, 2]);
    }
}
