//! Simulated scribbles: one random-walk polyline per ground-truth segment.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{HardLabeling, PartialLabeling};
use crate::{Error, Result};

/// Fraction of a segment's pixels covered by a full-length scribble.
pub const FULL_SCRIBBLE_FRACTION: f64 = 0.03;

const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// 8-connected components of equal label, as pixel lists.
pub fn segments(gt: &HardLabeling) -> Vec<Vec<usize>> {
    let (h, w) = (gt.height(), gt.width());
    let labels = gt.labels();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            k += 1;
            for (dy, dx) in DIRS {
                if let Some(j) = step(h, w, i, dy, dx) {
                    if !seen[j] && labels[j] == labels[start] {
                        seen[j] = true;
                        comp.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn step(h: usize, w: usize, i: usize, dy: isize, dx: isize) -> Option<usize> {
    let (y, x) = ((i / w) as isize + dy, (i % w) as isize + dx);
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
}

/// Pixels of `mask` whose whole 8-neighbourhood (inside the image) is in
/// `mask`.
fn erode(h: usize, w: usize, mask: &[bool]) -> Vec<bool> {
    (0..h * w)
        .map(|i| mask[i] && DIRS.iter().all(|&(dy, dx)| step(h, w, i, dy, dx).map_or(true, |j| mask[j])))
        .collect()
}

fn walk(rng: &mut ChaCha8Rng, h: usize, w: usize, mask: &[bool], pixels: &[usize], target: usize) -> Vec<usize> {
    let mut visited = vec![false; h * w];
    let mut path = Vec::with_capacity(target);
    let mut pos = *pixels.choose(rng).expect("non-empty segment");
    visited[pos] = true;
    path.push(pos);
    let mut dir = rng.gen_range(0..8usize);
    let mut budget = 20 * target + 20;
    while path.len() < target && budget > 0 {
        budget -= 1;
        if rng.gen_bool(0.15) {
            dir = (dir + if rng.gen_bool(0.5) { 1 } else { 7 }) % 8;
        }
        // straight first, then gentle turns, then sharper ones
        let mut order = vec![dir];
        for turn in 1..=4usize {
            let (l, r) = ((dir + turn) % 8, (dir + 8 - turn) % 8);
            if rng.gen_bool(0.5) {
                order.extend([l, r]);
            } else {
                order.extend([r, l]);
            }
        }
        order.dedup();
        let candidates: Vec<(usize, usize)> = order
            .iter()
            .filter_map(|&d| {
                let (dy, dx) = DIRS[d];
                step(h, w, pos, dy, dx).filter(|&j| mask[j]).map(|j| (d, j))
            })
            .collect();
        let next = candidates
            .iter()
            .find(|&&(_, j)| !visited[j])
            .or_else(|| candidates.first())
            .copied();
        match next {
            Some((d, j)) => {
                dir = d;
                pos = j;
                if !visited[j] {
                    visited[j] = true;
                    path.push(j);
                }
            }
            None => break,
        }
    }
    path
}

/// Scribbles for a ground-truth map. `ratio = 0` places one click per
/// segment; `ratio = 1` draws polylines covering about 3% of each segment.
/// Walks stay inside the segment eroded twice (once, or not at all, for thin
/// segments).
pub fn gen_scribbles(gt: &HardLabeling, ratio: f64, seed: u64) -> Result<PartialLabeling> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("scribble ratio {ratio} outside [0, 1]")));
    }
    let (h, w) = (gt.height(), gt.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = PartialLabeling::empty(h, w);
    for seg in segments(gt) {
        let mut mask = vec![false; h * w];
        for &i in &seg {
            mask[i] = true;
        }
        let mut interior = mask.clone();
        for _ in 0..2 {
            let e = erode(h, w, &interior);
            if e.iter().any(|&b| b) {
                interior = e;
            } else {
                break;
            }
        }
        let pixels: Vec<usize> = seg.iter().copied().filter(|&i| interior[i]).collect();
        let target = ((ratio * FULL_SCRIBBLE_FRACTION * seg.len() as f64).round() as usize).max(1);
        let label = gt.labels()[seg[0]];
        for i in walk(&mut rng, h, w, &interior, &pixels, target) {
            seeds.set(i, Some(label));
        }
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scenes::{gen_scenes, SceneConfig};

    #[test]
    fn clicks_one_per_segment() {
        let scenes = gen_scenes(5, &SceneConfig::default(), 2).unwrap();
        for (k, s) in scenes.iter().enumerate() {
            let seeds = gen_scribbles(&s.gt, 0.0, k as u64).unwrap();
            let segs = segments(&s.gt);
            assert_eq!(seeds.seed_count(), segs.len());
            for seg in segs {
                assert_eq!(seg.iter().filter(|&&i| seeds.get(i).is_some()).count(), 1);
            }
        }
    }

    #[test]
    fn full_ratio_near_three_percent() {
        let scenes = gen_scenes(20, &SceneConfig::default(), 5).unwrap();
        let mut total = 0;
        for (k, s) in scenes.iter().enumerate() {
            let seeds = gen_scribbles(&s.gt, 1.0, k as u64).unwrap();
            assert!(seeds.satisfied_by(&s.gt));
            total += seeds.seed_count();
        }
        let frac = total as f64 / (20.0 * 64.0 * 64.0);
        assert!((frac - 0.03).abs() <= 0.015, "{frac}");
    }

    #[test]
    fn tiny_segment_gets_a_click() {
        let mut labels = vec![0u8; 25];
        labels[12] = 1;
        let gt = HardLabeling::new(5, 5, labels).unwrap();
        let seeds = gen_scribbles(&gt, 1.0, 0).unwrap();
        assert_eq!(seeds.get(12), Some(1));
    }

    #[test]
    fn bad_ratio() {
        let gt = HardLabeling::constant(2, 2, 0).unwrap();
        assert!(gen_scribbles(&gt, 1.5, 0).is_err());
    }
}
