//! Point-tracking baseline: advect each click along the flow, then grow a
//! colour-homogeneous region around the tracked point.

use std::collections::VecDeque;

use crate::annotate::PointSet;
use crate::error::{Error, Result};
use crate::synth::VideoSample;
use crate::video::{BinaryMask, FlowField, Image, LabelMap};

pub const DEFAULT_TAU: f64 = 0.15;

/// Moves `(x, y)` by the flow at that pixel, rounding and clamping to the frame.
pub fn advect_point(point: (usize, usize), flow: &FlowField) -> (usize, usize) {
    let (dx, dy) = flow.get(point.0, point.1);
    let step = |p: usize, d: f32, n: usize| -> usize {
        let v = (p as f64 + d as f64).round();
        v.clamp(0.0, (n - 1) as f64) as usize
    };
    (step(point.0, dx, flow.width), step(point.1, dy, flow.height))
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// 4-connected flood fill from `seed` over pixels within `tau` (L2, RGB in
/// [0,1]) of the seed colour.
pub fn region_grow(image: &Image, seed: (usize, usize), tau: f64) -> BinaryMask {
    let (w, h) = (image.width, image.height);
    let reference = image.pixel(seed.0, seed.1);
    let mut mask = BinaryMask::new(h, w);
    let mut queue = VecDeque::from([seed]);
    mask.set(seed.0, seed.1, true);
    while let Some((x, y)) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx >= w || ny >= h || mask.get(nx, ny) {
                continue;
            }
            if color_distance(image.pixel(nx, ny), reference) <= tau {
                mask.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        }
    }
    mask
}

fn dist2(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    dx * dx + dy * dy
}

/// Combines per-object regions into a label map; a pixel claimed by several
/// objects goes to the one whose seed is nearest, ties to the lower id.
pub fn merge_regions(height: usize, width: usize, regions: &[(u8, (usize, usize), BinaryMask)]) -> LabelMap {
    let mut out = LabelMap::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let best = regions
                .iter()
                .filter(|(_, _, m)| m.get(x, y))
                .min_by(|a, b| {
                    dist2(a.1, (x, y))
                        .total_cmp(&dist2(b.1, (x, y)))
                        .then(a.0.cmp(&b.0))
                });
            if let Some((id, _, _)) = best {
                out.set(x, y, *id);
            }
        }
    }
    out
}

/// Per-frame tracked points and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRun {
    pub masks: Vec<LabelMap>,
    /// `tracks[t][k]` is object `k`'s point in frame `t`.
    pub tracks: Vec<Vec<(u8, (usize, usize))>>,
}

pub fn run_baseline(sample: &VideoSample, points: &PointSet, tau: f64) -> Result<BaselineRun> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tau must be non-negative, got {tau}")));
    }
    points.check_bounds(sample.height, sample.width)?;
    let mut current: Vec<(u8, (usize, usize))> = points.objects().iter().map(|c| (c.id, (c.x, c.y))).collect();
    let mut masks = Vec::with_capacity(sample.num_frames());
    let mut tracks = Vec::with_capacity(sample.num_frames());
    for t in 0..sample.num_frames() {
        if t > 0 {
            for (_, p) in current.iter_mut() {
                *p = advect_point(*p, &sample.flows[t]);
            }
        }
        let regions: Vec<_> = current
            .iter()
            .map(|&(id, p)| (id, p, region_grow(&sample.frames[t], p, tau)))
            .collect();
        masks.push(merge_regions(sample.height, sample.width, &regions));
        tracks.push(current.clone());
    }
    Ok(BaselineRun { masks, tracks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_uniform_flow() {
        let mut f = FlowField::zeros(8, 8);
        assert_eq!(advect_point((3, 4), &f), (3, 4));
        for y in 0..8 {
            for x in 0..8 {
                f.set(x, y, (2.0, 0.0));
            }
        }
        assert_eq!(advect_point((3, 4), &f), (5, 4));
        assert_eq!(advect_point((7, 4), &f), (7, 4));
    }

    #[test]
    fn uniform_image_fills_everything() {
        let mut img = Image::new(5, 7);
        for y in 0..5 {
            for x in 0..7 {
                img.set_pixel(x, y, [0.3, 0.3, 0.3]);
            }
        }
        assert_eq!(region_grow(&img, (2, 2), 0.01).count(), 35);
    }

    #[test]
    fn flat_square_on_contrasting_background() {
        let mut img = Image::new(10, 10);
        for y in 3..7 {
            for x in 2..8 {
                img.set_pixel(x, y, [1.0, 0.0, 0.0]);
            }
        }
        let m = region_grow(&img, (4, 4), 0.5);
        let expect = BinaryMask::from_fn(10, 10, |x, y| (2..8).contains(&x) && (3..7).contains(&y));
        assert_eq!(m, expect);
    }

    #[test]
    fn zero_tau_on_noise_is_tiny() {
        let mut img = Image::new(6, 6);
        for y in 0..6 {
            for x in 0..6 {
                let v = ((x * 7 + y * 13) % 11) as f64 / 11.0;
                img.set_pixel(x, y, [v, 1.0 - v, 0.5]);
            }
        }
        let m = region_grow(&img, (2, 3), 0.0);
        assert!(m.get(2, 3));
        assert!(m.count() <= 3);
    }

    #[test]
    fn overlap_goes_to_nearer_seed_then_lower_id() {
        let all = BinaryMask::from_fn(1, 5, |_, _| true);
        let regions = vec![(2, (4, 0), all.clone()), (1, (0, 0), all)];
        let m = merge_regions(1, 5, &regions);
        assert_eq!(m.data, vec![1, 1, 1, 2, 2]);
        let all = BinaryMask::from_fn(1, 3, |_, _| true);
        let m = merge_regions(1, 3, &[(2, (2, 0), all.clone()), (1, (0, 0), all)]);
        assert_eq!(m.data, vec![1, 1, 2]);
    }
}
