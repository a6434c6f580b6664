use clickvos_tensor::{
    grad_check, multi_head_attention, multi_head_attention_with_weights, AttentionParams, GradCheckOptions, Graph,
    Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn identity(c: usize) -> Tensor {
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        data[i * c + i] = 1.0;
    }
    Tensor::new([c, c], data).unwrap()
}

fn params(g: &mut Graph, c: usize, heads: usize, ws: [Tensor; 4]) -> AttentionParams {
    let [q, k, v, o] = ws.map(|w| g.constant(w));
    AttentionParams::new(c, heads, q, k, v, o).unwrap()
}

/// Plain nested-loop attention with identity projections.
fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let c = q[0].len();
    let dk = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for d in cols.clone() {
                    out[i][d] += e[j] / z * vj[d];
                }
            }
        }
    }
    out
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

#[test]
fn single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 8;
    let mut g = Graph::new();
    let ws = [(); 4].map(|_| random(&mut rng, &[c, c]));
    let (wv, wo) = (ws[2].clone(), ws[3].clone());
    let p = params(&mut g, c, 2, ws);
    let q = g.constant(random(&mut rng, &[5, c]));
    let kv = random(&mut rng, &[1, c]);
    let k = g.constant(random(&mut rng, &[1, c]));
    let v = g.constant(kv);
    let out = multi_head_attention(&mut g, q, k, v, &p).unwrap();
    // Expected: v * W_V * W_O for every query row.
    let wv = g.constant(wv);
    let wo = g.constant(wo);
    let pv = g.matmul(v, wv).unwrap();
    let expected = g.matmul(pv, wo).unwrap();
    let expected = g.value(expected).to_vec();
    for row in g.value(out).chunks(c) {
        for (a, b) in row.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn weights_are_row_stochastic_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 8;
    let qt = random(&mut rng, &[3, c]);
    let kt = random(&mut rng, &[4, c]);
    let vt = random(&mut rng, &[4, c]);
    let mut g = Graph::new();
    let p = params(&mut g, c, 4, [identity(c), identity(c), identity(c), identity(c)]);
    let (q, k, v) = (g.constant(qt.clone()), g.constant(kt), g.constant(vt));
    let (_, w) = multi_head_attention_with_weights(&mut g, q, k, v, &p).unwrap();
    assert_eq!(g.shape(w), &[4, 3, 4]);
    for row in g.value(w).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // A constant added to every logit of a row leaves its softmax unchanged.
    let logits = Tensor::new([2, 3], vec![0.1, -0.4, 2.0, 1.0, 1.0, 0.3]).unwrap();
    let shifted = Tensor::new([2, 3], logits.data().iter().map(|l| l + 7.5).collect()).unwrap();
    let a = g.constant(logits);
    let b = g.constant(shifted);
    let sa = g.softmax(a).unwrap();
    let sb = g.softmax(b).unwrap();
    for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn identity_projection_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for heads in [1, 2, 4] {
        let c = 4;
        let qt = random(&mut rng, &[2, c]);
        let kt = random(&mut rng, &[3, c]);
        let vt = random(&mut rng, &[3, c]);
        let mut g = Graph::new();
        let p = params(&mut g, c, heads, [identity(c), identity(c), identity(c), identity(c)]);
        let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
        let out = multi_head_attention(&mut g, q, k, v, &p).unwrap();
        let oracle = dense_attention(&rows(&qt), &rows(&kt), &rows(&vt), heads);
        for (a, b) in g.value(out).iter().zip(oracle.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12, "heads {heads}: {a} vs {b}");
        }
    }
}

#[test]
fn key_value_row_mismatch_is_rejected() {
    let c = 4;
    let mut g = Graph::new();
    let p = params(&mut g, c, 2, [identity(c), identity(c), identity(c), identity(c)]);
    let q = g.constant(Tensor::zeros([2, c]));
    let k = g.constant(Tensor::zeros([3, c]));
    let v = g.constant(Tensor::zeros([2, c]));
    assert!(matches!(
        multi_head_attention(&mut g, q, k, v, &p),
        Err(TensorError::ShapeMismatch { kind: "attention", .. })
    ));
    assert!(AttentionParams::new(6, 4, q, q, q, q).is_err());
}

#[test]
fn attention_block_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = 8;
    let inputs = vec![
        random(&mut rng, &[5, c]),
        random(&mut rng, &[3, c]),
        random(&mut rng, &[c, c]),
        random(&mut rng, &[c, c]),
        random(&mut rng, &[c, c]),
        random(&mut rng, &[c, c]),
        random(&mut rng, &[c]),
        random(&mut rng, &[c]),
    ];
    let weights = random(&mut rng, &[5, c]);
    // Pre-norm residual block: x + MHA(LN(x), mem, mem).
    let f = |g: &mut Graph, v: &[Var]| {
        let p = AttentionParams::new(c, 2, v[2], v[3], v[4], v[5])?;
        let xn = g.layer_norm(v[0], v[6], v[7], 1e-5)?;
        let a = multi_head_attention(g, xn, v[1], v[1], &p)?;
        let y = g.add(v[0], a)?;
        let w = g.constant(weights.clone());
        let yw = g.mul(y, w)?;
        g.sum(yw, None)
    };
    let report = grad_check(f, &inputs, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{:?}", report.inputs);
}
