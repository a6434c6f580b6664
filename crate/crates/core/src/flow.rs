//! Linear 3-channel flow encoding consumed by the motion branch.

use crate::video::{FlowField, Image};

/// Encodes `(dx, dy)` as `(dx / v, dy / v, |d| / (sqrt(2) v))`, each clipped to `[-1, 1]`.
///
/// Panics if `v_max` is not positive.
pub fn encode_flow(flow: &FlowField, v_max: f64) -> Image {
    assert!(v_max > 0.0, "v_max must be positive");
    let mut img = Image::new(flow.height, flow.width);
    let norm = std::f64::consts::SQRT_2 * v_max;
    for (px, d) in img.data.chunks_mut(3).zip(flow.data.chunks(2)) {
        let (dx, dy) = (d[0] as f64, d[1] as f64);
        px[0] = (dx / v_max).clamp(-1.0, 1.0);
        px[1] = (dy / v_max).clamp(-1.0, 1.0);
        px[2] = (dx.hypot(dy) / norm).clamp(-1.0, 1.0);
    }
    img
}

/// Inverse of the first two channels of [`encode_flow`] (exact inside the clip range).
pub fn decode_flow(image: &Image, v_max: f64) -> FlowField {
    let mut flow = FlowField::zeros(image.height, image.width);
    for (d, px) in flow.data.chunks_mut(2).zip(image.data.chunks(3)) {
        d[0] = (px[0] * v_max) as f32;
        d[1] = (px[1] * v_max) as f32;
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_flow_encodes_to_zero() {
        let img = encode_flow(&FlowField::zeros(3, 4), 4.0);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_at_v_max_along_x() {
        let mut f = FlowField::zeros(1, 1);
        f.set(0, 0, (4.0, 0.0));
        let img = encode_flow(&f, 4.0);
        assert_eq!(img.pixel(0, 0)[0], 1.0);
        assert_eq!(img.pixel(0, 0)[1], 0.0);
        assert!((img.pixel(0, 0)[2] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn encode_decode_is_idempotent_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v_max = 3.0;
        let mut f = FlowField::zeros(8, 8);
        for v in f.data.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let once = encode_flow(&f, v_max);
        let twice = encode_flow(&decode_flow(&once, v_max), v_max);
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn large_flow_is_clipped() {
        let mut f = FlowField::zeros(1, 1);
        f.set(0, 0, (-100.0, 100.0));
        let img = encode_flow(&f, 2.0);
        assert_eq!(img.pixel(0, 0), [-1.0, 1.0, 1.0]);
    }
}
