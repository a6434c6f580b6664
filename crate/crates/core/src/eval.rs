//! Region similarity J, boundary accuracy F, and their aggregation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{list_sequences, read_mask_sequence};
use crate::video::{BinaryMask, LabelMap};

fn check_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_j(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Set pixels with a 4-neighbour outside the mask or outside the image.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.height, mask.width, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let (x, y) = (x as isize, y as isize);
        [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .any(|&(dx, dy)| !mask.get_signed(x + dx, y + dy))
    })
}

/// Default boundary tolerance: `ceil(0.008 * image diagonal)`, at least 1.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.008 * diag).ceil() as usize).max(1)
}

/// Square (Chebyshev) dilation by radius `w`, done separably.
fn dilate_square(mask: &BinaryMask, w: usize) -> BinaryMask {
    let (h, wd) = (mask.height, mask.width);
    let mut rows = BinaryMask::new(h, wd);
    for y in 0..h {
        for x in 0..wd {
            let lo = x.saturating_sub(w);
            let hi = (x + w).min(wd - 1);
            rows.set(x, y, (lo..=hi).any(|xx| mask.get(xx, y)));
        }
    }
    BinaryMask::from_fn(h, wd, |x, y| {
        let lo = y.saturating_sub(w);
        let hi = (y + w).min(h - 1);
        (lo..=hi).any(|yy| rows.get(x, yy))
    })
}

fn matched_fraction(source: &BinaryMask, target_dilated: &BinaryMask) -> f64 {
    let total = source.count();
    let hit = source
        .data
        .iter()
        .zip(&target_dilated.data)
        .filter(|&(&s, &t)| s && t)
        .count();
    hit as f64 / total as f64
}

/// Boundary F-measure with tolerance `w` pixels (Chebyshev distance).
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, w: usize) -> Result<f64> {
    check_shape(pred, gt)?;
    let bp = boundary(pred);
    let bg = boundary(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &dilate_square(&bg, w));
    let recall = matched_fraction(&bg, &dilate_square(&bp, w));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Which frames enter the aggregates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrameSelection {
    #[default]
    All,
    ExcludeFirst,
    FirstOnly,
}

impl FrameSelection {
    fn includes(self, t: usize) -> bool {
        match self {
            FrameSelection::All => true,
            FrameSelection::ExcludeFirst => t > 0,
            FrameSelection::FirstOnly => t == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub sequence: String,
    pub object_id: u8,
    /// 1-based frame index.
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub sequence: String,
    pub j: f64,
    pub f: f64,
}

impl SequenceScore {
    pub fn jf(&self) -> f64 {
        (self.j + self.f) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ScoreRow>,
    pub sequences: Vec<SequenceScore>,
    pub j: f64,
    pub f: f64,
}

impl EvalReport {
    pub fn jf(&self) -> f64 {
        (self.j + self.f) / 2.0
    }

    /// `sequence,object_id,frame,J,F` rows followed by per-sequence and
    /// global aggregate rows (`object_id` and `frame` set to `mean`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,object_id,frame,J,F\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6}", r.sequence, r.object_id, r.frame, r.j, r.f);
        }
        for s in &self.sequences {
            let _ = writeln!(out, "{},mean,mean,{:.6},{:.6}", s.sequence, s.j, s.f);
        }
        let _ = writeln!(out, "ALL,mean,mean,{:.6},{:.6}", self.j, self.f);
        let _ = writeln!(out, "ALL,J&F,J&F,{:.6},{:.6}", self.jf(), self.jf());
        out
    }
}

/// A named sequence of label maps.
pub type MaskSequence = (String, Vec<LabelMap>);

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores `pred` against `gt`. Objects are the non-zero labels appearing in
/// any gt frame. Scores are averaged over frames per object, then over
/// objects per sequence, then over sequences.
pub fn evaluate(pred: &[MaskSequence], gt: &[MaskSequence], selection: FrameSelection) -> Result<EvalReport> {
    let mut gaps = Vec::new();
    for (name, g) in gt {
        match pred.iter().find(|(n, _)| n == name) {
            None => gaps.push(format!("{name}: missing sequence")),
            Some((_, p)) => {
                for t in 0..g.len().max(p.len()) {
                    match (p.get(t), g.get(t)) {
                        (None, _) => gaps.push(format!("{name}: missing predicted frame {}", t + 1)),
                        (_, None) => gaps.push(format!("{name}: predicted frame {} has no ground truth", t + 1)),
                        (Some(a), Some(b)) if !a.same_shape(b) => gaps.push(format!(
                            "{name}: frame {} is {}x{} but ground truth is {}x{}",
                            t + 1,
                            a.height,
                            a.width,
                            b.height,
                            b.width
                        )),
                        _ => {}
                    }
                }
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MissingData(gaps));
    }

    let mut rows = Vec::new();
    let mut sequences = Vec::new();
    for (name, g) in gt {
        let p = &pred.iter().find(|(n, _)| n == name).expect("checked above").1;
        let objects: BTreeSet<u8> = g.iter().flat_map(|m| m.labels()).filter(|&l| l != 0).collect();
        let (mut seq_j, mut seq_f) = (Vec::new(), Vec::new());
        for &id in &objects {
            let (mut obj_j, mut obj_f) = (Vec::new(), Vec::new());
            for t in (0..g.len()).filter(|&t| selection.includes(t)) {
                let pm = p[t].mask_of(id);
                let gm = g[t].mask_of(id);
                let j = region_j(&pm, &gm)?;
                let f = boundary_f(&pm, &gm, default_tolerance(gm.height, gm.width))?;
                rows.push(ScoreRow {
                    sequence: name.clone(),
                    object_id: id,
                    frame: t + 1,
                    j,
                    f,
                });
                obj_j.push(j);
                obj_f.push(f);
            }
            if !obj_j.is_empty() {
                seq_j.push(mean(&obj_j));
                seq_f.push(mean(&obj_f));
            }
        }
        sequences.push(SequenceScore {
            sequence: name.clone(),
            j: mean(&seq_j),
            f: mean(&seq_f),
        });
    }
    let j = mean(&sequences.iter().map(|s| s.j).collect::<Vec<_>>());
    let f = mean(&sequences.iter().map(|s| s.f).collect::<Vec<_>>());
    Ok(EvalReport { rows, sequences, j, f })
}

/// Loads every sequence under `root`. A sequence is either a sample
/// directory (masks read from its `masks/` subdirectory) or a plain
/// directory of `.pgm` frames.
pub fn load_mask_root(root: &Path) -> Result<Vec<MaskSequence>> {
    let mut dirs = list_sequences(root)?;
    if dirs.is_empty() {
        dirs = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let masks_dir = d.join("masks");
            let src = if masks_dir.is_dir() { masks_dir } else { d.clone() };
            Ok((name, read_mask_sequence(&src)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn region_j_examples() {
        let a = rect(8, 8, 0, 0, 4, 1);
        let b = rect(8, 8, 2, 0, 6, 1);
        assert!((region_j(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(region_j(&a, &a).unwrap(), 1.0);
        assert_eq!(region_j(&a, &rect(8, 8, 5, 5, 7, 7)).unwrap(), 0.0);
        assert_eq!(region_j(&BinaryMask::new(3, 3), &BinaryMask::new(3, 3)).unwrap(), 1.0);
        assert!(region_j(&a, &BinaryMask::new(3, 3)).is_err());
    }

    #[test]
    fn boundary_of_square() {
        let m = rect(6, 6, 1, 1, 5, 5);
        assert_eq!(boundary(&m).count(), 12);
        let full = rect(3, 3, 0, 0, 3, 3);
        assert_eq!(boundary(&full).pixels(), vec![(0, 0), (1, 0), (2, 0), (0, 1), (2, 1), (0, 2), (1, 2), (2, 2)]);
    }

    #[test]
    fn boundary_f_edge_cases() {
        let m = rect(16, 16, 2, 2, 9, 9);
        assert_eq!(boundary_f(&m, &m, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&BinaryMask::new(16, 16), &m, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&BinaryMask::new(16, 16), &BinaryMask::new(16, 16), 1).unwrap(), 1.0);
    }

    #[test]
    fn default_tolerance_values() {
        assert_eq!(default_tolerance(64, 64), 1);
        assert_eq!(default_tolerance(480, 854), 8);
    }

    fn seq(name: &str, frames: Vec<LabelMap>) -> MaskSequence {
        (name.to_string(), frames)
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let mut m = LabelMap::new(8, 8);
        m.set(2, 2, 1);
        m.set(5, 5, 2);
        let gt = vec![seq("a", vec![m.clone(), m.clone()])];
        let r = evaluate(&gt, &gt, FrameSelection::All).unwrap();
        assert_eq!((r.j, r.f, r.jf()), (1.0, 1.0, 1.0));
        let empty = vec![seq("a", vec![LabelMap::new(8, 8); 2])];
        let r = evaluate(&empty, &gt, FrameSelection::All).unwrap();
        assert_eq!(r.j, 0.0);
        assert!(r.rows.iter().all(|row| row.j == 0.0));
    }

    #[test]
    fn gaps_are_listed() {
        let m = LabelMap::new(4, 4);
        let gt = vec![seq("a", vec![m.clone(); 3]), seq("b", vec![m.clone()])];
        let pred = vec![seq("a", vec![m.clone(); 2])];
        match evaluate(&pred, &gt, FrameSelection::All) {
            Err(Error::MissingData(g)) => {
                assert_eq!(g.len(), 2);
                assert!(g[0].contains("frame 3"));
                assert!(g[1].contains("b: missing sequence"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frame_selection_filters_rows() {
        let mut m = LabelMap::new(4, 4);
        m.set(1, 1, 1);
        let gt = vec![seq("a", vec![m.clone(); 3])];
        assert_eq!(evaluate(&gt, &gt, FrameSelection::ExcludeFirst).unwrap().rows.len(), 2);
        let first = evaluate(&gt, &gt, FrameSelection::FirstOnly).unwrap();
        assert_eq!(first.rows.len(), 1);
        assert_eq!(first.rows[0].frame, 1);
    }

    #[test]
    fn csv_has_header_and_aggregates() {
        let mut m = LabelMap::new(4, 4);
        m.set(1, 1, 1);
        let gt = vec![seq("a", vec![m])];
        let csv = evaluate(&gt, &gt, FrameSelection::All).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sequence,object_id,frame,J,F");
        assert_eq!(lines[1], "a,1,1,1.000000,1.000000");
        assert!(lines.last().unwrap().starts_with("ALL,J&F"));
    }
}
