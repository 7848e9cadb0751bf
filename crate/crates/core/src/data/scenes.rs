//! Synthetic scenes: a cluttered background plus rectangles and ellipses,
//! one colour per class, with Gaussian pixel noise.
//!
//! Objects may carry two-tone stripes along a class-specific colour axis and
//! the background may contain grey clutter patches. Both create strong
//! image edges that do not separate classes, so an edge-driven CRF alone
//! cannot recover the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::crf::{HardLabeling, PartialLabeling};
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// An image with exact ground truth and (possibly empty) scribbles.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub gt: HardLabeling,
    pub seeds: PartialLabeling,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_std: f64,
    /// Half-width of the per-image uniform jitter added to each class colour.
    pub color_jitter: f64,
    /// Spread of the class palette around mid-grey (0.5 uses the full cube).
    pub palette_spread: f64,
    /// Shape extent as fractions of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Stripe amplitude inside objects (0 disables).
    pub texture: f64,
    /// Grey background patches per image.
    pub clutter: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            noise_std: 0.1,
            color_jitter: 0.0,
            palette_spread: 0.5,
            min_extent: 0.25,
            max_extent: 0.6,
            texture: 0.15,
            clutter: 4,
        }
    }
}

/// Fixed class colours: evenly spaced hues around mid-grey, background
/// darkest. Deterministic in `classes` only.
pub fn palette(classes: usize, spread: f64) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|k| {
            if k == 0 {
                return [0.5 - spread * 0.6; 3];
            }
            let t = (k - 1) as f64 / (classes - 1).max(1) as f64 * std::f64::consts::TAU;
            let c = |phase: f64| 0.5 + spread * 0.8 * (t + phase).cos();
            [c(0.0), c(2.0944), c(4.1888)]
        })
        .collect()
}

/// Unit colour direction of the stripes of class `k`.
fn stripe_axis(k: usize) -> [f64; 3] {
    let axes = [[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]];
    let a = axes[k % 3];
    let n = 2f64.sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Grey levels used for background clutter.
const CLUTTER_TONES: [f64; 3] = [0.35, 0.55, 0.75];

#[derive(Clone, Copy, Debug)]
struct Stripes {
    cos: f64,
    sin: f64,
    period: f64,
    phase: f64,
}

impl Stripes {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            period: rng.gen_range(6.0..10.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn sign(&self, y: f64, x: f64) -> f64 {
        let t = (x * self.cos + y * self.sin) / self.period * std::f64::consts::TAU + self.phase;
        if t.sin() >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Self {
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let eh = rng.gen_range(cfg.min_extent..=cfg.max_extent) * h;
        let ew = rng.gen_range(cfg.min_extent..=cfg.max_extent) * w;
        let y0 = rng.gen_range(0.0..=(h - eh).max(0.0));
        let x0 = rng.gen_range(0.0..=(w - ew).max(0.0));
        if rng.gen_bool(0.5) {
            Shape::Rect {
                y0,
                x0,
                y1: y0 + eh,
                x1: x0 + ew,
            }
        } else {
            Shape::Ellipse {
                cy: y0 + eh / 2.0,
                cx: x0 + ew / 2.0,
                ry: eh / 2.0,
                rx: ew / 2.0,
            }
        }
    }
}

const MIN_VISIBLE_FRACTION: f64 = 0.02;
const MAX_RETRIES: usize = 100;

/// Per-pixel appearance besides the class colour.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Tone {
    Plain,
    Stripe(f64),
    Clutter(f64),
}

/// Ground truth and appearance for one scene. Clutter is painted first,
/// then shapes of distinct foreground classes in order; a layout where some
/// class keeps less than 2% of the image visible is redrawn.
fn layout(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Result<(HardLabeling, Vec<Tone>)> {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    for _ in 0..MAX_RETRIES {
        let mut tones = vec![Tone::Plain; n];
        let clutter_cfg = SceneConfig {
            min_extent: 0.1,
            max_extent: 0.3,
            ..cfg.clone()
        };
        for _ in 0..cfg.clutter {
            let shape = Shape::random(rng, &clutter_cfg);
            let tone = CLUTTER_TONES[rng.gen_range(0..CLUTTER_TONES.len())];
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        tones[y * w + x] = Tone::Clutter(tone);
                    }
                }
            }
        }
        let count = rng.gen_range(1..cfg.classes);
        let mut classes: Vec<u8> = (1..cfg.classes as u8).collect();
        for i in (1..classes.len()).rev() {
            classes.swap(i, rng.gen_range(0..=i));
        }
        classes.truncate(count);
        let mut labels = vec![0u8; n];
        for &c in &classes {
            let shape = Shape::random(rng, cfg);
            let stripes = Stripes::random(rng);
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                    if shape.contains(fy, fx) {
                        labels[y * w + x] = c;
                        tones[y * w + x] = if cfg.texture > 0.0 {
                            Tone::Stripe(stripes.sign(fy, fx))
                        } else {
                            Tone::Plain
                        };
                    }
                }
            }
        }
        let min_px = ((n as f64 * MIN_VISIBLE_FRACTION).ceil() as usize).max(1);
        let ok = classes
            .iter()
            .chain(std::iter::once(&0))
            .all(|&c| labels.iter().filter(|&&l| l == c).count() >= min_px);
        if ok {
            return Ok((HardLabeling::new(h, w, labels)?, tones));
        }
    }
    Err(Error::Config(format!(
        "could not place shapes in a {h}x{w} image after {MAX_RETRIES} attempts"
    )))
}

/// Image values are quantised to 8 bits so that a saved and reloaded
/// dataset is identical to the in-memory one.
fn render(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    gt: &HardLabeling,
    tones: &[Tone],
    colors: &[[f64; 3]],
) -> Result<Tensor> {
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let jitter: Vec<[f64; 3]> = colors
        .iter()
        .map(|_| {
            let mut j = [0.0; 3];
            if cfg.color_jitter > 0.0 {
                for v in &mut j {
                    *v = rng.gen_range(-cfg.color_jitter..=cfg.color_jitter);
                }
            }
            j
        })
        .collect();
    let mut data = Vec::with_capacity(gt.len() * 3);
    for (&l, &tone) in gt.labels().iter().zip(tones) {
        let axis = stripe_axis(l as usize);
        for c in 0..3 {
            let mut v = match tone {
                Tone::Plain => colors[l as usize][c] + jitter[l as usize][c],
                Tone::Stripe(s) => colors[l as usize][c] + jitter[l as usize][c] + s * cfg.texture * axis[c],
                Tone::Clutter(g) => g,
            };
            if cfg.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    Tensor::new(vec![gt.height(), gt.width(), 3], data)
}

/// `n` scenes without scribbles; a pure function of `(cfg, seed)`.
pub fn gen_scenes(n: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<SegSample>> {
    if cfg.classes < 2 || cfg.classes > 254 {
        return Err(Error::Config(format!("classes must be in 2..=254, got {}", cfg.classes)));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("empty image size".into()));
    }
    if !(0.0 < cfg.min_extent && cfg.min_extent <= cfg.max_extent && cfg.max_extent <= 1.0) {
        return Err(Error::Config("shape extents must satisfy 0 < min <= max <= 1".into()));
    }
    let colors = palette(cfg.classes, cfg.palette_spread);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (gt, tones) = layout(&mut rng, cfg)?;
            let image = render(&mut rng, cfg, &gt, &tones, &colors)?;
            let seeds = PartialLabeling::empty(cfg.height, cfg.width);
            Ok(SegSample { image, gt, seeds })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_is_piecewise_constant() {
        let cfg = SceneConfig {
            noise_std: 0.0,
            texture: 0.0,
            clutter: 0,
            ..Default::default()
        };
        let s = &gen_scenes(3, &cfg, 1).unwrap()[2];
        let colors = palette(4, 0.5);
        for (i, &l) in s.gt.labels().iter().enumerate() {
            for c in 0..3 {
                let want = (colors[l as usize][c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                assert_eq!(s.image.data()[i * 3 + c], want);
            }
        }
    }

    #[test]
    fn noiseless_tones() {
        let cfg = SceneConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        let colors = palette(4, 0.5);
        let (mut stripes, mut clutter) = (0, 0);
        for s in gen_scenes(5, &cfg, 4).unwrap() {
            for (i, &l) in s.gt.labels().iter().enumerate() {
                let px = &s.image.data()[i * 3..i * 3 + 3];
                let base = colors[l as usize];
                let axis = stripe_axis(l as usize);
                let striped = |sign: f64| (0..3).all(|c| px[c] == q(base[c] + sign * cfg.texture * axis[c]));
                if l == 0 {
                    let plain = (0..3).all(|c| px[c] == q(base[c]));
                    let grey = CLUTTER_TONES.iter().any(|&g| px.iter().all(|&v| v == q(g)));
                    assert!(plain || grey);
                    clutter += usize::from(grey);
                } else {
                    assert!(striped(1.0) || striped(-1.0));
                    stripes += usize::from(striped(-1.0));
                }
            }
        }
        assert!(stripes > 0 && clutter > 0);
    }

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_scenes(4, &cfg, 9).unwrap(), gen_scenes(4, &cfg, 9).unwrap());
        assert_ne!(gen_scenes(1, &cfg, 9).unwrap(), gen_scenes(1, &cfg, 10).unwrap());
    }

    #[test]
    fn class_coverage() {
        let scenes = gen_scenes(100, &SceneConfig::default(), 3).unwrap();
        let mut hist = [0usize; 4];
        for s in &scenes {
            for l in s.gt.present_labels() {
                hist[l as usize] += 1;
            }
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
        assert_eq!(hist[0], 100);
    }

    #[test]
    fn palette_distinct() {
        let p = palette(4, 0.5);
        for a in 0..4 {
            for b in a + 1..4 {
                let d: f64 = (0..3).map(|c| (p[a][c] - p[b][c]).powi(2)).sum();
                assert!(d > 0.01);
            }
        }
    }
}
