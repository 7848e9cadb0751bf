//! Synthetic datasets and their on-disk layout.
//!
//! ```text
//! DIR/manifest.txt
//! DIR/images/NNN.ppm
//! DIR/gt/NNN.pgm
//! DIR/scribbles_rR/NNN.pgm     R in {0, 30, 50, 80, 100}
//! ```

pub mod noisy;
pub mod pnm;
pub mod scenes;
pub mod scribbles;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use noisy::{gen_noisy_cls, BlobConfig, NoisyClsSample};
pub use pnm::Pixmap;
pub use scenes::{gen_scenes, palette, SceneConfig, SegSample};
pub use scribbles::{gen_scribbles, segments};

use crate::{Error, Result};

/// Scribble ratios stored on disk, in percent.
pub const STORED_RATIOS: [u32; 5] = [0, 30, 50, 80, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train: 20,
            val: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl Dataset {
    pub fn in_channels(&self) -> usize {
        self.train.first().or(self.val.first()).map_or(3, |s| s.image.shape()[2])
    }
}

fn ratio_percent(ratio: f64) -> Result<u32> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("scribble ratio {ratio} outside [0, 1]")));
    }
    Ok((ratio * 100.0).round() as u32)
}

fn scribble_seed(seed: u64, index: usize, percent: u32) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add((index as u64) << 8)
        .wrapping_add(percent as u64)
}

/// Scenes with scribbles at `ratio`; train and val scenes share one
/// sequence so the split is stable under changes to `val`.
pub fn generate(spec: &DatasetSpec, ratio: f64) -> Result<Dataset> {
    let pct = ratio_percent(ratio)?;
    let mut all = gen_scenes(spec.train + spec.val, &spec.scene, spec.seed)?;
    for (i, s) in all.iter_mut().enumerate() {
        s.seeds = gen_scribbles(&s.gt, pct as f64 / 100.0, scribble_seed(spec.seed, i, pct))?;
    }
    let val = all.split_off(spec.train);
    Ok(Dataset {
        classes: spec.scene.classes,
        train: all,
        val,
    })
}

fn manifest_text(spec: &DatasetSpec) -> String {
    let s = &spec.scene;
    let mut out = String::from("# synthetic scribble dataset\n");
    for (k, v) in [
        ("classes", s.classes.to_string()),
        ("height", s.height.to_string()),
        ("width", s.width.to_string()),
        ("noise_std", s.noise_std.to_string()),
        ("color_jitter", s.color_jitter.to_string()),
        ("palette_spread", s.palette_spread.to_string()),
        ("min_extent", s.min_extent.to_string()),
        ("max_extent", s.max_extent.to_string()),
        ("texture", s.texture.to_string()),
        ("clutter", s.clutter.to_string()),
        ("seed", spec.seed.to_string()),
        ("train", spec.train.to_string()),
        ("val", spec.val.to_string()),
    ] {
        writeln!(out, "{k} {v}").unwrap();
    }
    let ratios: Vec<String> = STORED_RATIOS.iter().map(u32::to_string).collect();
    writeln!(out, "ratios {}", ratios.join(",")).unwrap();
    for i in 0..spec.train + spec.val {
        let split = if i < spec.train { "train" } else { "val" };
        writeln!(out, "sample {i:03} {split}").unwrap();
    }
    out
}

/// Parses a manifest back into the spec that produced it.
pub fn parse_manifest(text: &str) -> Result<DatasetSpec> {
    let mut spec = DatasetSpec::default();
    let (mut train, mut val) = (0, 0);
    let bad = |k: &str, v: &str| Error::Parse(format!("manifest: bad value {v:?} for {k}"));
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        let val_str = it.next().ok_or_else(|| Error::Parse(format!("manifest: no value for {key}")))?;
        let f = || val_str.parse::<f64>().map_err(|_| bad(key, val_str));
        let u = || val_str.parse::<usize>().map_err(|_| bad(key, val_str));
        match key {
            "classes" => spec.scene.classes = u()?,
            "height" => spec.scene.height = u()?,
            "width" => spec.scene.width = u()?,
            "noise_std" => spec.scene.noise_std = f()?,
            "color_jitter" => spec.scene.color_jitter = f()?,
            "palette_spread" => spec.scene.palette_spread = f()?,
            "min_extent" => spec.scene.min_extent = f()?,
            "max_extent" => spec.scene.max_extent = f()?,
            "texture" => spec.scene.texture = f()?,
            "clutter" => spec.scene.clutter = u()?,
            "seed" => spec.seed = val_str.parse().map_err(|_| bad(key, val_str))?,
            "train" => spec.train = u()?,
            "val" => spec.val = u()?,
            "ratios" => {}
            "sample" => match it.next() {
                Some("train") => train += 1,
                Some("val") => val += 1,
                other => return Err(Error::Parse(format!("manifest: bad split {other:?}"))),
            },
            _ => return Err(Error::Parse(format!("manifest: unknown key {key}"))),
        }
    }
    if train != spec.train || val != spec.val {
        return Err(Error::Parse("manifest sample list disagrees with counts".into()));
    }
    Ok(spec)
}

/// Writes images, ground truth, every stored scribble ratio and the
/// manifest.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "gt"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (r, &pct) in STORED_RATIOS.iter().enumerate() {
        let ds = generate(spec, pct as f64 / 100.0)?;
        let sub = dir.join(format!("scribbles_r{pct}"));
        fs::create_dir_all(&sub)?;
        for (i, s) in ds.train.iter().chain(&ds.val).enumerate() {
            if r == 0 {
                pnm::image_to_pixmap(&s.image)?.write(dir.join(format!("images/{i:03}.ppm")))?;
                pnm::labels_to_pixmap(&s.gt).write(dir.join(format!("gt/{i:03}.pgm")))?;
            }
            pnm::seeds_to_pixmap(&s.seeds).write(sub.join(format!("{i:03}.pgm")))?;
        }
    }
    fs::write(dir.join("manifest.txt"), manifest_text(spec))?;
    Ok(())
}

pub fn read_spec(dir: impl AsRef<Path>) -> Result<DatasetSpec> {
    parse_manifest(&fs::read_to_string(dir.as_ref().join("manifest.txt"))?)
}

/// Loads a dataset with the scribbles stored for `ratio`.
pub fn read_dataset(dir: impl AsRef<Path>, ratio: f64) -> Result<Dataset> {
    let dir = dir.as_ref();
    let spec = read_spec(dir)?;
    let pct = ratio_percent(ratio)?;
    if !STORED_RATIOS.contains(&pct) {
        return Err(Error::InvalidArgument(format!(
            "no stored scribbles for ratio {ratio}; available percentages {STORED_RATIOS:?}"
        )));
    }
    let mut all = Vec::with_capacity(spec.train + spec.val);
    for i in 0..spec.train + spec.val {
        let image = pnm::pixmap_to_image(&Pixmap::read(dir.join(format!("images/{i:03}.ppm")))?)?;
        let gt = pnm::pixmap_to_labels(&Pixmap::read(dir.join(format!("gt/{i:03}.pgm")))?)?;
        let seeds = pnm::pixmap_to_seeds(&Pixmap::read(dir.join(format!("scribbles_r{pct}/{i:03}.pgm")))?)?;
        if image.shape()[..2] != [gt.height(), gt.width()]
            || seeds.height() != gt.height()
            || seeds.width() != gt.width()
        {
            return Err(Error::Shape(format!("sample {i:03}: image, ground truth and scribbles differ in size")));
        }
        if !seeds.satisfied_by(&gt) {
            return Err(Error::Parse(format!("sample {i:03}: scribbles disagree with ground truth")));
        }
        all.push(SegSample { image, gt, seeds });
    }
    let val = all.split_off(spec.train);
    Ok(Dataset {
        classes: spec.scene.classes,
        train: all,
        val,
    })
}
