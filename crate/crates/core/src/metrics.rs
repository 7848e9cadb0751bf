//! Mean intersection-over-union and boundary-band (trimap) evaluation.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::crf::{HardLabeling, UNLABELED};
use crate::{Error, Result};

/// `counts[gt * K + pred]`. Pixels labelled 255 in either map are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel where `mask` is true (or all pixels without a mask).
    pub fn accumulate(&mut self, pred: &HardLabeling, gt: &HardLabeling, mask: Option<&[bool]>) -> Result<()> {
        check_dims(pred, gt)?;
        self.accumulate_raw(pred.labels(), gt.labels(), mask)
    }

    /// Same as [`accumulate`](Self::accumulate) on raw label slices, where
    /// 255 marks ignored pixels.
    pub fn accumulate_raw(&mut self, pred: &[u8], gt: &[u8], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
            return Err(Error::Shape("label maps and mask differ in length".into()));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if p == UNLABELED || g == UNLABELED || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let inter = self.get(c, c);
                let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur; `None` when nothing was counted.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

fn check_dims(pred: &HardLabeling, gt: &HardLabeling) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn class_bound(pred: &HardLabeling, gt: &HardLabeling) -> usize {
    let m = |s: &HardLabeling| {
        s.labels()
            .iter()
            .filter(|&&l| l != UNLABELED)
            .max()
            .map_or(0, |&l| l as usize + 1)
    };
    m(pred).max(m(gt))
}

/// Mean IoU of one prediction. An empty evaluation region yields 0.
pub fn miou(pred: &HardLabeling, gt: &HardLabeling, mask: Option<&[bool]>) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(class_bound(pred, gt));
    cm.accumulate(pred, gt, mask)?;
    Ok(cm.miou().unwrap_or(0.0))
}

/// Dataset-level mIoU from a confusion matrix accumulated over all pairs.
pub fn dataset_miou(pairs: &[(HardLabeling, HardLabeling)], classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    for (pred, gt) in pairs {
        cm.accumulate(pred, gt, None)?;
    }
    Ok(cm.miou().unwrap_or(0.0))
}

/// Chebyshev distance from each pixel to the nearest ground-truth boundary
/// pixel (a pixel with an 8-neighbour of another label). `None` everywhere
/// when there is no boundary.
pub fn boundary_distance(gt: &HardLabeling) -> Vec<Option<usize>> {
    let (h, w) = (gt.height(), gt.width());
    let mut dist = vec![None; h * w];
    let mut queue = VecDeque::new();
    let neighbours = |y: usize, x: usize| {
        let mut out = Vec::with_capacity(8);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if (dy, dx) != (0, 0) && ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out.push(ny as usize * w + nx as usize);
                }
            }
        }
        out
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let l = gt.labels()[i];
            if neighbours(y, x).into_iter().any(|j| gt.labels()[j] != l) {
                dist[i] = Some(0);
                queue.push_back(i);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let d = dist[i].unwrap();
        for j in neighbours(i / w, i % w) {
            if dist[j].is_none() {
                dist[j] = Some(d + 1);
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Pixels whose boundary distance is below `width`: width 1 is the
/// boundary pixels themselves.
pub fn band_mask(distance: &[Option<usize>], width: usize) -> Vec<bool> {
    distance.iter().map(|d| d.is_some_and(|d| d < width)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandScore {
    pub width: usize,
    /// `None` when the ground truth has no boundary.
    pub miou: Option<f64>,
    pub pixels: usize,
}

pub fn trimap_miou(pred: &HardLabeling, gt: &HardLabeling, widths: &[usize]) -> Result<Vec<BandScore>> {
    check_dims(pred, gt)?;
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument("trimap widths must be >= 1".into()));
    }
    let dist = boundary_distance(gt);
    let has_boundary = dist.iter().any(Option::is_some);
    widths
        .iter()
        .map(|&width| {
            if !has_boundary {
                return Ok(BandScore {
                    width,
                    miou: None,
                    pixels: 0,
                });
            }
            let mask = band_mask(&dist, width);
            Ok(BandScore {
                width,
                miou: Some(miou(pred, gt, Some(&mask))?),
                pixels: mask.iter().filter(|&&m| m).count(),
            })
        })
        .collect()
}

/// Band mIoU over a dataset, each band accumulated into one confusion
/// matrix across images.
pub fn dataset_trimap(
    pairs: &[(HardLabeling, HardLabeling)],
    classes: usize,
    widths: &[usize],
) -> Result<Vec<BandScore>> {
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument("trimap widths must be >= 1".into()));
    }
    let mut cms = vec![ConfusionMatrix::new(classes); widths.len()];
    let mut pixels = vec![0; widths.len()];
    for (pred, gt) in pairs {
        check_dims(pred, gt)?;
        let dist = boundary_distance(gt);
        for (b, &width) in widths.iter().enumerate() {
            let mask = band_mask(&dist, width);
            pixels[b] += mask.iter().filter(|&&m| m).count();
            cms[b].accumulate(pred, gt, Some(&mask))?;
        }
    }
    Ok(widths
        .iter()
        .zip(cms)
        .zip(pixels)
        .map(|((&width, cm), pixels)| BandScore {
            width,
            miou: cm.miou(),
            pixels,
        })
        .collect())
}

/// `width,miou,pixels`; not-applicable bands print as `NA`.
pub fn bands_csv(bands: &[BandScore]) -> String {
    let mut out = String::from("width,miou,pixels\n");
    for b in bands {
        match b.miou {
            Some(m) => writeln!(out, "{},{m:.6},{}", b.width, b.pixels),
            None => writeln!(out, "{},NA,{}", b.width, b.pixels),
        }
        .unwrap();
    }
    out
}

/// `class,iou,gt_pixels,pred_pixels`.
pub fn per_class_csv(cm: &ConfusionMatrix) -> String {
    let k = cm.classes();
    let mut out = String::from("class,iou,gt_pixels,pred_pixels\n");
    for (c, iou) in cm.iou().into_iter().enumerate() {
        let gt: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let pred: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        let iou = iou.map_or("NA".to_string(), |v| format!("{v:.6}"));
        writeln!(out, "{c},{iou},{gt},{pred}").unwrap();
    }
    out
}
