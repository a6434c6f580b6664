//! First-frame click generation and point-file loading.
//!
//! Each object is eroded before sampling so clicks stay off the boundary;
//! objects too thin to survive erosion fall back to their full mask. The
//! background click is drawn from the un-eroded background.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{BinaryMask, LabelMap};

/// One click; `id` 0 is the background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Click {
    pub id: u8,
    pub x: usize,
    pub y: usize,
}

/// Exactly one click per object plus one for the background, sorted by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointSet {
    clicks: Vec<Click>,
}

impl PointSet {
    /// Sorts by id and checks for a background click and unique ids.
    pub fn new(mut clicks: Vec<Click>) -> Result<Self> {
        clicks.sort_by_key(|c| c.id);
        if clicks.first().map(|c| c.id) != Some(0) {
            return Err(Error::Schema("missing background point".into()));
        }
        if let Some(w) = clicks.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Schema(format!("duplicate object id {}", w[0].id)));
        }
        Ok(Self { clicks })
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn background(&self) -> Click {
        self.clicks[0]
    }

    /// Object clicks (ids >= 1).
    pub fn objects(&self) -> &[Click] {
        &self.clicks[1..]
    }

    /// Number of clicks including the background.
    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn max_id(&self) -> u8 {
        self.clicks.last().map_or(0, |c| c.id)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for c in &self.clicks {
            if c.x >= width || c.y >= height {
                return Err(Error::Schema(format!(
                    "point ({}, {}) for id {} outside {width}x{height}",
                    c.x, c.y, c.id
                )));
            }
        }
        Ok(())
    }

    /// Checks every click lies on its own label in `gt`, with one click per label.
    pub fn check_against(&self, gt: &LabelMap) -> Result<()> {
        self.check_bounds(gt.height, gt.width)?;
        for c in &self.clicks {
            let label = gt.get(c.x, c.y);
            if label != c.id {
                return Err(Error::Schema(format!(
                    "point ({}, {}) for id {} lies on label {label}",
                    c.x, c.y, c.id
                )));
            }
        }
        let ids: BTreeSet<u8> = self.clicks.iter().map(|c| c.id).collect();
        let labels: BTreeSet<u8> = gt.labels().into_iter().collect();
        if ids != labels {
            return Err(Error::Schema(format!(
                "point ids {ids:?} do not match mask labels {labels:?}"
            )));
        }
        Ok(())
    }

    pub fn to_file(&self) -> PointsFile {
        let bg = self.background();
        PointsFile {
            background: XY { x: bg.x, y: bg.y },
            objects: self
                .objects()
                .iter()
                .map(|c| ObjectXY { id: c.id, x: c.x, y: c.y })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XY {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectXY {
    pub id: u8,
    pub x: usize,
    pub y: usize,
}

/// JSON layout of a points file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsFile {
    pub background: XY,
    pub objects: Vec<ObjectXY>,
}

impl PointsFile {
    pub fn into_point_set(self) -> Result<PointSet> {
        if let Some(o) = self.objects.iter().find(|o| o.id == 0) {
            return Err(Error::Schema(format!("object entry at ({}, {}) uses background id 0", o.x, o.y)));
        }
        let mut clicks = vec![Click {
            id: 0,
            x: self.background.x,
            y: self.background.y,
        }];
        clicks.extend(self.objects.iter().map(|o| Click { id: o.id, x: o.x, y: o.y }));
        PointSet::new(clicks)
    }
}

/// Parses and validates a points file against the frame size and, when
/// given, the first-frame ground truth.
pub fn load_points(path: &Path, height: usize, width: usize, gt: Option<&LabelMap>) -> Result<PointSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: PointsFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let points = file.into_point_set()?;
    points.check_bounds(height, width)?;
    if let Some(gt) = gt {
        points.check_against(gt)?;
    }
    Ok(points)
}

pub fn save_points(path: &Path, points: &PointSet) -> Result<()> {
    let json = serde_json::to_vec_pretty(&points.to_file()).expect("points serialise");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Morphological erosion with a full 3x3 element, `iterations` times.
/// Pixels outside the image count as unset.
pub fn erode_mask(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut cur = mask.clone();
    for _ in 0..iterations {
        if cur.is_empty() {
            break;
        }
        let prev = cur.clone();
        for y in 0..prev.height {
            for x in 0..prev.width {
                if !prev.get(x, y) {
                    continue;
                }
                let (xi, yi) = (x as isize, y as isize);
                let keep = (-1..=1).all(|dy| (-1..=1).all(|dx| prev.get_signed(xi + dx, yi + dy)));
                cur.set(x, y, keep);
            }
        }
    }
    cur
}

/// Morphological dilation with a full 3x3 element, `iterations` times.
pub fn dilate_mask(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let prev = cur.clone();
        for y in 0..prev.height {
            for x in 0..prev.width {
                if prev.get(x, y) {
                    continue;
                }
                let (xi, yi) = (x as isize, y as isize);
                let hit = (-1..=1).any(|dy| (-1..=1).any(|dx| prev.get_signed(xi + dx, yi + dy)));
                cur.set(x, y, hit);
            }
        }
    }
    cur
}

/// Uniformly random set pixel, drawing from `rng`.
pub fn sample_point_with(mask: &BinaryMask, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let pixels = mask.pixels();
    if pixels.is_empty() {
        return Err(Error::Annotation("cannot sample a point from an empty mask".into()));
    }
    Ok(pixels[rng.random_range(0..pixels.len())])
}

/// Uniformly random set pixel under a generator seeded with `seed`.
pub fn sample_point(mask: &BinaryMask, seed: u64) -> Result<(usize, usize)> {
    sample_point_with(mask, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Erosion depth for an object: `max(1, floor(0.1 * shorter bbox side))`.
pub fn erosion_depth(mask: &BinaryMask) -> usize {
    match mask.bbox() {
        Some((x0, y0, x1, y1)) => {
            let side = (x1 - x0 + 1).min(y1 - y0 + 1);
            ((side as f64 * 0.1).floor() as usize).max(1)
        }
        None => 1,
    }
}

/// Outcome of annotating one object, kept for protocol audits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectAnnotation {
    pub click: Click,
    pub erosion: usize,
    pub fell_back: bool,
}

/// Clicks for the background and each of `object_ids`, plus per-object details.
pub fn annotate_detailed(gt: &LabelMap, object_ids: &[u8], seed: u64) -> Result<(PointSet, Vec<ObjectAnnotation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = gt.mask_of(0);
    if background.is_empty() {
        return Err(Error::Annotation("frame has no background pixels".into()));
    }
    let (bx, by) = sample_point_with(&background, &mut rng)?;
    let mut clicks = vec![Click { id: 0, x: bx, y: by }];
    let mut details = Vec::with_capacity(object_ids.len());
    let mut ids = object_ids.to_vec();
    ids.sort_unstable();
    for id in ids {
        if id == 0 {
            return Err(Error::Annotation("object ids must be non-zero".into()));
        }
        let mask = gt.mask_of(id);
        if mask.is_empty() {
            return Err(Error::Annotation(format!("object {id} has no pixels")));
        }
        let erosion = erosion_depth(&mask);
        let eroded = erode_mask(&mask, erosion);
        let fell_back = eroded.is_empty();
        let region = if fell_back { &mask } else { &eroded };
        let (x, y) = sample_point_with(region, &mut rng)?;
        let click = Click { id, x, y };
        clicks.push(click);
        details.push(ObjectAnnotation {
            click,
            erosion,
            fell_back,
        });
    }
    Ok((PointSet::new(clicks)?, details))
}

/// Clicks for every object label present in `gt`.
pub fn annotate_first_frame(gt: &LabelMap, seed: u64) -> Result<PointSet> {
    let ids: Vec<u8> = gt.labels().into_iter().filter(|&l| l != 0).collect();
    if ids.is_empty() {
        return Err(Error::Annotation("frame has no objects".into()));
    }
    annotate_detailed(gt, &ids, seed).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    /// Erosion straight from the definition: keep p iff its whole 3x3 window is set.
    fn erode_oracle(m: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(m.height, m.width, |x, y| {
            let mut all = true;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    all &= m.get_signed(x as isize + dx, y as isize + dy);
                }
            }
            all
        })
    }

    #[test]
    fn three_by_three_erodes_to_centre() {
        let m = BinaryMask::from_fn(3, 3, |_, _| true);
        let e = erode_mask(&m, 1);
        assert_eq!(e.pixels(), vec![(1, 1)]);
        assert_eq!(e, erode_oracle(&m));
    }

    #[test]
    fn empty_and_zero_iterations() {
        let empty = BinaryMask::new(4, 4);
        assert_eq!(erode_mask(&empty, 3), empty);
        let m = square(8, 8, 1, 1, 4);
        assert_eq!(erode_mask(&m, 0), m);
    }

    #[test]
    fn erosion_matches_oracle_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let bits: Vec<bool> = (0..120).map(|_| rng.random_bool(0.75)).collect();
            let m = BinaryMask::from_fn(10, 12, |x, y| bits[y * 12 + x]);
            let once = erode_mask(&m, 1);
            assert_eq!(once, erode_oracle(&m));
            let twice = erode_mask(&m, 2);
            assert!(twice.is_subset_of(&once));
            assert!(once.is_subset_of(&m));
        }
    }

    #[test]
    fn single_pixel_mask_samples_that_pixel() {
        let mut m = BinaryMask::new(5, 5);
        m.set(3, 2, true);
        for seed in 0..10 {
            assert_eq!(sample_point(&m, seed).unwrap(), (3, 2));
        }
        assert!(sample_point(&BinaryMask::new(2, 2), 0).is_err());
    }

    #[test]
    fn two_pixel_mask_is_sampled_fairly() {
        let mut m = BinaryMask::new(1, 4);
        m.set(0, 0, true);
        m.set(3, 0, true);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let left = (0..n)
            .filter(|_| sample_point_with(&m, &mut rng).unwrap() == (0, 0))
            .count();
        let freq = left as f64 / n as f64;
        assert!((0.45..=0.55).contains(&freq), "{freq}");
        assert_eq!(sample_point(&m, 5).unwrap(), sample_point(&m, 5).unwrap());
    }

    #[test]
    fn twenty_pixel_square_clicks_inside_interior() {
        let mut gt = LabelMap::new(40, 40);
        for (x, y) in square(40, 40, 10, 10, 20).pixels() {
            gt.set(x, y, 1);
        }
        for seed in 0..200 {
            let (p, d) = annotate_detailed(&gt, &[1], seed).unwrap();
            assert_eq!(d[0].erosion, 2);
            assert!(!d[0].fell_back);
            let c = p.objects()[0];
            assert!((12..28).contains(&c.x) && (12..28).contains(&c.y), "{c:?}");
            assert_eq!(gt.get(p.background().x, p.background().y), 0);
        }
    }

    #[test]
    fn single_pixel_object_falls_back() {
        let mut gt = LabelMap::new(6, 6);
        gt.set(4, 1, 1);
        let (p, d) = annotate_detailed(&gt, &[1], 3).unwrap();
        assert!(d[0].fell_back);
        assert_eq!((p.objects()[0].x, p.objects()[0].y), (4, 1));
    }

    #[test]
    fn two_objects_give_three_points() {
        let mut gt = LabelMap::new(20, 20);
        for (x, y) in square(20, 20, 1, 1, 6).pixels() {
            gt.set(x, y, 1);
        }
        for (x, y) in square(20, 20, 10, 10, 7).pixels() {
            gt.set(x, y, 2);
        }
        let p = annotate_first_frame(&gt, 42).unwrap();
        assert_eq!(p.clicks().iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        p.check_against(&gt).unwrap();
        assert_eq!(p, annotate_first_frame(&gt, 42).unwrap());
    }

    #[test]
    fn missing_object_is_an_error() {
        let gt = LabelMap::new(4, 4);
        assert!(matches!(annotate_detailed(&gt, &[1], 0), Err(Error::Annotation(_))));
    }
}
