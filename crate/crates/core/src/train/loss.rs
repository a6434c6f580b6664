use clickvos_tensor::{Graph, Var};

use crate::error::{Error, Result};
use crate::video::LabelMap;

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1e-6;

fn one_hot(gt: &LabelMap, k: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; gt.data.len() * k];
    for (i, &l) in gt.data.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::Shape(format!("label {l} has no logit channel (n_max {k})")));
        }
        out[i * k + l as usize] = 1.0;
    }
    Ok(out)
}

fn flat_logits(g: &mut Graph, logits: Var, gt: &LabelMap) -> Result<(Var, usize, usize)> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || (s[0], s[1]) != (gt.height, gt.width) {
        return Err(Error::Shape(format!("logits {s:?} do not match mask {}x{}", gt.height, gt.width)));
    }
    let n = s[0] * s[1];
    Ok((g.reshape(logits, [n, s[2]])?, n, s[2]))
}

/// Mean of the largest `ceil(r * H * W)` per-pixel cross-entropies.
pub fn bootstrapped_ce(g: &mut Graph, logits: Var, gt: &LabelMap, ratio: f64) -> Result<Var> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("bootstrap ratio {ratio} outside (0, 1]")));
    }
    let (flat, n, k) = flat_logits(g, logits, gt)?;
    let row_max: Vec<f64> = g
        .value(flat)
        .chunks(k)
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g.constant_from([n, 1], row_max)?;
    let shifted = g.sub(flat, shift)?;
    let e = g.exp(shifted)?;
    let s = g.sum(e, Some(1))?;
    let lse = g.log(s)?;
    let oh = g.constant_from([n, k], one_hot(gt, k)?)?;
    let picked = g.mul(shifted, oh)?;
    let picked = g.sum(picked, Some(1))?;
    let ce = g.sub(lse, picked)?;
    let keep = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return Ok(g.mean(ce, None)?);
    }
    let vals = g.value(ce);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    order.truncate(keep);
    let top = g.gather_rows(ce, order)?;
    Ok(g.mean(top, None)?)
}

/// `1 - mean_c dice_c` over the classes present in `gt`.
pub fn dice_loss(g: &mut Graph, logits: Var, gt: &LabelMap) -> Result<Var> {
    let (flat, n, k) = flat_logits(g, logits, gt)?;
    let p = g.softmax(flat)?;
    let oh_data = one_hot(gt, k)?;
    let mut gsum = vec![0.0; k];
    for row in oh_data.chunks(k) {
        for (c, v) in row.iter().enumerate() {
            gsum[c] += v;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| gsum[c] > 0.0).collect();
    let oh = g.constant_from([n, k], oh_data)?;
    let inter = g.mul(p, oh)?;
    let inter = g.sum(inter, Some(0))?;
    let num = g.scale(inter, 2.0)?;
    let psum = g.sum(p, Some(0))?;
    let denom_const = g.constant_from([k], gsum.iter().map(|v| v + DICE_EPS).collect())?;
    let denom = g.add(psum, denom_const)?;
    let dice = g.div(num, denom)?;
    let dice = g.gather_rows(dice, present)?;
    let mean = g.mean(dice, None)?;
    let one = g.constant_from(Vec::<usize>::new(), vec![1.0])?;
    Ok(g.sub(one, mean)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ce_oracle(logits: &[f64], labels: &[u8], k: usize, ratio: f64) -> f64 {
        let mut ce: Vec<f64> = logits
            .chunks(k)
            .zip(labels)
            .map(|(r, &l)| {
                let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - r[l as usize]
            })
            .collect();
        ce.sort_by(|a, b| b.total_cmp(a));
        let keep = (ratio * ce.len() as f64).ceil() as usize;
        ce[..keep].iter().sum::<f64>() / keep as f64
    }

    fn dice_oracle(logits: &[f64], labels: &[u8], k: usize) -> f64 {
        let probs: Vec<Vec<f64>> = logits
            .chunks(k)
            .map(|r| {
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                r.iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..k {
            let g: f64 = labels.iter().filter(|&&l| l as usize == c).count() as f64;
            if g == 0.0 {
                continue;
            }
            present += 1;
            let inter: f64 = probs.iter().zip(labels).filter(|(_, &l)| l as usize == c).map(|(p, _)| p[c]).sum();
            let psum: f64 = probs.iter().map(|p| p[c]).sum();
            total += 2.0 * inter / (psum + g + DICE_EPS);
        }
        1.0 - total / present as f64
    }

    fn eval_losses(h: usize, w: usize, k: usize, logits: &[f64], labels: &[u8], ratio: f64) -> (f64, f64) {
        let gt = LabelMap::from_data(h, w, labels.to_vec()).unwrap();
        let mut g = Graph::new();
        let l = g.constant_from([h, w, k], logits.to_vec()).unwrap();
        let ce = bootstrapped_ce(&mut g, l, &gt, ratio).unwrap();
        let dice = dice_loss(&mut g, l, &gt).unwrap();
        (g.scalar(ce), g.scalar(dice))
    }

    #[test]
    fn full_ratio_is_plain_mean() {
        let logits = [2.0, 0.0, 0.0, 1.0, 0.5, 0.5];
        let (ce, _) = eval_losses(1, 3, 2, &logits, &[0, 1, 0], 1.0);
        let expect = ce_oracle(&logits, &[0, 1, 0], 2, 1.0);
        assert!((ce - expect).abs() < 1e-12);
    }

    #[test]
    fn half_ratio_keeps_two_hardest_pixels() {
        let logits: [f64; 8] = [3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let labels = [0, 1, 1, 0];
        let per: Vec<f64> = logits
            .chunks(2)
            .zip(labels)
            .map(|(r, l)| (r[0].exp() + r[1].exp()).ln() - r[l])
            .collect();
        let (ce, _) = eval_losses(2, 2, 2, &logits, &labels.map(|l| l as u8), 0.5);
        assert!((ce - (per[1] + per[2]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dice_of_half_confident_prediction() {
        // One-pixel object, uniform two-class prediction everywhere on two pixels.
        let (_, dice) = eval_losses(1, 2, 2, &[0.0; 4], &[0, 1], 1.0);
        let expect = 1.0 - (2.0 * 0.5 / (1.0 + 1.0 + DICE_EPS));
        assert!((dice - expect).abs() < 1e-12);
        let big = 50.0;
        let (_, perfect) = eval_losses(1, 2, 2, &[big, 0.0, 0.0, big], &[0, 1], 1.0);
        assert!(perfect < 1e-6);
    }

    #[test]
    fn uniform_predictor_loss_is_log_k() {
        let (ce, _) = eval_losses(4, 4, 4, &[0.0; 64], &[0; 16], 0.4);
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_beyond_channels_is_rejected() {
        let gt = LabelMap::from_data(1, 2, vec![0, 3]).unwrap();
        let mut g = Graph::new();
        let l = g.constant_from([1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(bootstrapped_ce(&mut g, l, &gt, 1.0).is_err());
        assert!(dice_loss(&mut g, l, &gt).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn losses_match_brute_force(
            h in 1usize..5, w in 1usize..5, k in 2usize..5, ratio in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k as u8)).collect();
            let (ce, dice) = eval_losses(h, w, k, &logits, &labels, ratio);
            prop_assert!((ce - ce_oracle(&logits, &labels, k, ratio)).abs() < 1e-9);
            prop_assert!((dice - dice_oracle(&logits, &labels, k)).abs() < 1e-9);
            let (mean, _) = eval_losses(h, w, k, &logits, &labels, 1.0);
            prop_assert!(ce >= mean - 1e-12);
        }
    }
}
