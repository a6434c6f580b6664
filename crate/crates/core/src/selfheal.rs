//! Corrupted-first-frame experiments: the mask committed to memory for
//! frame 1 is damaged and later frames show whether the memory recovers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotate::annotate_first_frame;
use crate::error::Result;
use crate::eval::region_j;
use crate::model::{infer_video, AbsModel, InferOptions, MemoryFlags};
use crate::synth::{SceneSampler, VideoSample};
use crate::video::LabelMap;

pub const DEFAULT_CORRUPTION: f64 = 0.3;
const BLOB_RADIUS: isize = 3;

/// Damages every object of `mask` with random local erosions and
/// dilations until the changed area reaches `fraction` of the object's
/// area. Dilation only claims background pixels.
pub fn corrupt_mask(mask: &LabelMap, fraction: f64, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mask.clone();
    let (w, h) = (mask.width as isize, mask.height as isize);
    for id in mask.labels().into_iter().filter(|&l| l != 0) {
        let area = mask.mask_of(id).count();
        let target = (fraction * area as f64).round() as usize;
        let changed = |m: &LabelMap| {
            m.data
                .iter()
                .zip(&mask.data)
                .filter(|&(&a, &b)| (a == id) != (b == id))
                .count()
        };
        let mut guard = 0;
        while changed(&out) < target && guard < 10_000 {
            guard += 1;
            let erode = rng.random_bool(0.5);
            let inside = |m: &LabelMap, x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize) == id;
            let mut edge = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let here = inside(&out, x, y);
                    let touches = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|&(dx, dy)| inside(&out, x + dx, y + dy) != here);
                    if touches && here == erode && (here || out.get(x as usize, y as usize) == 0) {
                        edge.push((x, y));
                    }
                }
            }
            if edge.is_empty() {
                break;
            }
            let (cx, cy) = edge[rng.random_range(0..edge.len())];
            let snapshot = out.clone();
            for dy in -BLOB_RADIUS..=BLOB_RADIUS {
                for dx in -BLOB_RADIUS..=BLOB_RADIUS {
                    let (x, y) = (cx + dx, cy + dy);
                    if dx * dx + dy * dy > BLOB_RADIUS * BLOB_RADIUS || x < 0 || y < 0 || x >= w || y >= h {
                        continue;
                    }
                    let (ux, uy) = (x as usize, y as usize);
                    if erode && snapshot.get(ux, uy) == id {
                        out.set(ux, uy, 0);
                    } else if !erode && snapshot.get(ux, uy) == 0 {
                        out.set(ux, uy, id);
                    }
                }
            }
        }
    }
    out
}

/// Ten fixed sequences of two well-separated objects.
pub fn curated_suite() -> Result<Vec<VideoSample>> {
    let sampler = SceneSampler {
        frames: 8,
        objects: 2,
        size_range: [16.0, 24.0],
        ..SceneSampler::default()
    };
    (0..10u64).map(|i| sampler.sample(70_000 + i).map(|(_, s)| s)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfHealReport {
    /// `object_j[t]` holds J of every (sequence, object) pair at frame `t`.
    pub object_j: Vec<Vec<f64>>,
    pub median_j: Vec<f64>,
}

impl SelfHealReport {
    /// Median object J at 1-based frame `t`.
    pub fn median_at(&self, t: usize) -> f64 {
        self.median_j[t - 1]
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every sequence with a corrupted frame-1 memory mask and collects
/// per-frame object J.
pub fn run_selfheal(model: &AbsModel, suite: &[VideoSample], flags: MemoryFlags, fraction: f64, seed: u64) -> Result<SelfHealReport> {
    let frames = suite.iter().map(|s| s.num_frames()).min().unwrap_or(0);
    let mut object_j = vec![Vec::new(); frames];
    for (i, s) in suite.iter().enumerate() {
        let points = annotate_first_frame(&s.masks[0], s.seed)?;
        let corrupted = corrupt_mask(&s.masks[0], fraction, seed.wrapping_add(i as u64));
        let out = infer_video(
            model,
            s,
            &points,
            &InferOptions {
                flags,
                first_mask_override: Some(corrupted),
            },
        )?;
        for (t, js) in object_j.iter_mut().enumerate() {
            for &id in &s.object_ids {
                js.push(region_j(&out.masks[t].mask_of(id), &s.masks[t].mask_of(id))?);
            }
        }
    }
    let median_j = object_j.iter().map(|v| median(v)).collect();
    Ok(SelfHealReport { object_j, median_j })
}
