use clickvos_core::eval::{boundary_f, evaluate, region_j, FrameSelection};
use clickvos_core::video::{BinaryMask, LabelMap};
use clickvos_core::Error;
use proptest::prelude::*;

fn mask_from(h: usize, w: usize, bits: &[bool]) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| bits[y * w + x])
}

fn rect(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
}

fn brute_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.get(x, y) {
                continue;
            }
            let inside = |dx: isize, dy: isize| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < m.width && (ny as usize) < m.height && m.get(nx as usize, ny as usize)
            };
            if !(inside(-1, 0) && inside(1, 0) && inside(0, -1) && inside(0, 1)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn brute_f(pred: &BinaryMask, gt: &BinaryMask, w: usize) -> f64 {
    let (bp, bg) = (brute_boundary(pred), brute_boundary(gt));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let near = |a: &(usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|b| a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= w)
    };
    let p = bp.iter().filter(|a| near(a, &bg)).count() as f64 / bp.len() as f64;
    let r = bg.iter().filter(|a| near(a, &bp)).count() as f64 / bg.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn brute_j(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let union = a.data.iter().zip(&b.data).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn metrics_match_brute_force_and_are_symmetric(
        a in prop::collection::vec(prop::bool::weighted(0.4), 256),
        b in prop::collection::vec(prop::bool::weighted(0.4), 256),
        w in 0usize..4,
    ) {
        let (pa, pb) = (mask_from(16, 16, &a), mask_from(16, 16, &b));
        let j = region_j(&pa, &pb).unwrap();
        prop_assert!((j - brute_j(&pa, &pb)).abs() <= 1e-12);
        prop_assert_eq!(j, region_j(&pb, &pa).unwrap());
        prop_assert!((0.0..=1.0).contains(&j));
        let f = boundary_f(&pa, &pb, w).unwrap();
        prop_assert!((f - brute_f(&pa, &pb, w)).abs() <= 1e-12);
        prop_assert!((f - boundary_f(&pb, &pa, w).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn translation_inside_the_frame_preserves_scores(
        x0 in 2usize..8, y0 in 2usize..8, sx in 2usize..8, sy in 2usize..8,
        ox in 0usize..3, oy in 0usize..3, dx in 0usize..6, dy in 0usize..6,
    ) {
        let gt = rect(32, 32, x0, y0, x0 + sx, y0 + sy);
        let pred = rect(32, 32, x0 + ox, y0 + oy, x0 + ox + sx, y0 + oy + sy);
        let gt2 = rect(32, 32, x0 + dx, y0 + dy, x0 + dx + sx, y0 + dy + sy);
        let pred2 = rect(32, 32, x0 + ox + dx, y0 + oy + dy, x0 + ox + dx + sx, y0 + oy + dy + sy);
        prop_assert_eq!(region_j(&pred, &gt).unwrap(), region_j(&pred2, &gt2).unwrap());
        prop_assert_eq!(boundary_f(&pred, &gt, 1).unwrap(), boundary_f(&pred2, &gt2, 1).unwrap());
    }
}

#[test]
fn nested_squares_give_area_ratio() {
    let outer = rect(32, 32, 4, 4, 24, 24);
    let inner = rect(32, 32, 9, 9, 19, 19);
    assert!((region_j(&inner, &outer).unwrap() - 100.0 / 400.0).abs() < 1e-12);
    assert_eq!(boundary_f(&outer, &outer, 0).unwrap(), 1.0);
    assert_eq!(boundary_f(&inner, &outer, 4).unwrap(), 0.0);
    assert_eq!(boundary_f(&inner, &outer, 5).unwrap(), 1.0);
}

#[test]
fn dataset_aggregation_averages_objects_then_sequences() {
    let mut g = LabelMap::new(4, 4);
    g.set(0, 0, 1);
    g.set(3, 3, 2);
    let mut p = g.clone();
    p.set(3, 3, 0);
    let mut g2 = LabelMap::new(4, 4);
    g2.set(1, 1, 1);
    let pred = vec![("a".to_string(), vec![p]), ("b".to_string(), vec![g2.clone()])];
    let gt = vec![("a".to_string(), vec![g]), ("b".to_string(), vec![g2])];
    let r = evaluate(&pred, &gt, FrameSelection::All).unwrap();
    assert!((r.sequences[0].j - 0.5).abs() < 1e-12);
    assert!((r.j - 0.75).abs() < 1e-12);
}

#[test]
fn mismatched_frame_counts_are_reported() {
    let m = LabelMap::new(4, 4);
    let pred = vec![("a".to_string(), vec![m.clone()])];
    let gt = vec![("a".to_string(), vec![m.clone(), m])];
    match evaluate(&pred, &gt, FrameSelection::All) {
        Err(Error::MissingData(list)) => assert_eq!(list.len(), 1),
        other => panic!("{other:?}"),
    }
}
