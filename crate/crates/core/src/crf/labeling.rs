use crate::{Error, Result};

pub type Label = u8;

/// Label value reserved for "no label" in label-map files.
pub const UNLABELED: Label = 255;

/// Per-pixel discrete segmentation, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HardLabeling {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl HardLabeling {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if labels.contains(&UNLABELED) {
            return Err(Error::InvalidArgument(format!(
                "label {UNLABELED} is reserved for unlabeled pixels"
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn constant(height: usize, width: usize, label: Label) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, pixel: usize, label: Label) {
        assert_ne!(label, UNLABELED);
        self.labels[pixel] = label;
    }

    /// Sorted distinct labels.
    pub fn present_labels(&self) -> Vec<Label> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=254u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn max_label(&self) -> Option<Label> {
        self.labels.iter().copied().max()
    }
}

/// Partially labeled map (scribbles / seeds); `None` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialLabeling {
    height: usize,
    width: usize,
    labels: Vec<Option<Label>>,
}

impl PartialLabeling {
    pub fn new(height: usize, width: usize, labels: Vec<Option<Label>>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} entries for a {height}x{width} map",
                labels.len()
            )));
        }
        if labels.contains(&Some(UNLABELED)) {
            return Err(Error::InvalidArgument("seed label collides with the unlabeled sentinel".into()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![None; height * width],
        }
    }

    /// From a raw map where [`UNLABELED`] marks missing labels.
    pub fn from_sentinel(height: usize, width: usize, raw: &[Label]) -> Result<Self> {
        Self::new(
            height,
            width,
            raw.iter().map(|&l| (l != UNLABELED).then_some(l)).collect(),
        )
    }

    pub fn to_sentinel(&self) -> Vec<Label> {
        self.labels.iter().map(|l| l.unwrap_or(UNLABELED)).collect()
    }

    /// Fully labeled partial map.
    pub fn from_hard(h: &HardLabeling) -> Self {
        Self {
            height: h.height(),
            width: h.width(),
            labels: h.labels().iter().map(|&l| Some(l)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Option<Label>] {
        &self.labels
    }

    pub fn get(&self, pixel: usize) -> Option<Label> {
        self.labels[pixel]
    }

    pub fn set(&mut self, pixel: usize, label: Option<Label>) {
        assert_ne!(label, Some(UNLABELED));
        self.labels[pixel] = label;
    }

    /// `(pixel, label)` for every labeled pixel, in pixel order.
    pub fn seeds(&self) -> impl Iterator<Item = (usize, Label)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l)))
    }

    pub fn seed_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn present_labels(&self) -> Vec<Label> {
        let mut seen = [false; 256];
        for (_, l) in self.seeds() {
            seen[l as usize] = true;
        }
        (0..=254u8).filter(|&l| seen[l as usize]).collect()
    }

    /// True when every seed agrees with `labeling`.
    pub fn satisfied_by(&self, labeling: &HardLabeling) -> bool {
        self.len() == labeling.len() && self.seeds().all(|(i, l)| labeling.labels()[i] == l)
    }
}
