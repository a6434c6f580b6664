//! Randomised inputs for every primitive, shared with the workspace acceptance suite.

use clickvos_tensor::{Graph, Primitive, PrimitiveKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for relu and log.
pub fn random_away_from_zero(rng: &mut impl Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if positive || rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random linear functional of `y`, so every output element gets a distinct weight.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> clickvos_tensor::Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(&mut rng, &shape);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> clickvos_tensor::Result<Var>>;

pub fn primitive_cases(rng: &mut ChaCha8Rng, seed: u64) -> Vec<(PrimitiveKind, Vec<Tensor>, Builder)> {
    let r = rng.random_range(1..=4usize);
    let c = rng.random_range(2..=4usize);
    let mut cases: Vec<(PrimitiveKind, Vec<Tensor>, Builder)> = Vec::new();
    let unary = |p: Primitive| -> Builder {
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.apply(p.clone(), &[v[0]])?;
            project(g, y, seed)
        })
    };
    let binary = |p: Primitive| -> Builder {
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.apply(p.clone(), &[v[0], v[1]])?;
            project(g, y, seed)
        })
    };
    cases.push((
        PrimitiveKind::MatMul,
        vec![random(rng, &[r, c]), random(rng, &[c, 3])],
        binary(Primitive::MatMul {
            transpose_a: false,
            transpose_b: false,
        }),
    ));
    cases.push((
        PrimitiveKind::MatMul,
        vec![random(rng, &[2, c, r]), random(rng, &[2, 3, c])],
        binary(Primitive::MatMul {
            transpose_a: true,
            transpose_b: true,
        }),
    ));
    cases.push((
        PrimitiveKind::MatMul,
        vec![random(rng, &[2, r, c]), random(rng, &[c, 2])],
        binary(Primitive::MatMul {
            transpose_a: false,
            transpose_b: false,
        }),
    ));
    cases.push((
        PrimitiveKind::Conv2d,
        vec![random(rng, &[3, 3, 1]), random(rng, &[3, 3, 1, 1])],
        binary(Primitive::Conv2d { stride: 1 }),
    ));
    cases.push((
        PrimitiveKind::Conv2d,
        vec![random(rng, &[4, 3, 1]), random(rng, &[3, 3, 1, 1])],
        binary(Primitive::Conv2d { stride: 2 }),
    ));
    cases.push((
        PrimitiveKind::Conv2d,
        vec![random(rng, &[2, 2, 2]), random(rng, &[1, 1, 2, 3])],
        binary(Primitive::Conv2d { stride: 1 }),
    ));
    for p in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
        let k = p.kind();
        cases.push((k, vec![random(rng, &[r, c]), random(rng, &[r, c])], binary(p.clone())));
        cases.push((k, vec![random(rng, &[r, c]), random(rng, &[c])], binary(p.clone())));
        cases.push((k, vec![random(rng, &[r, 1]), random(rng, &[1, c])], binary(p)));
    }
    cases.push((
        PrimitiveKind::Div,
        vec![random(rng, &[r, c]), random_away_from_zero(rng, &[r, 1], false)],
        binary(Primitive::Div),
    ));
    cases.push((PrimitiveKind::Scale, vec![random(rng, &[r, c])], unary(Primitive::Scale(-1.7))));
    cases.push((
        PrimitiveKind::Relu,
        vec![random_away_from_zero(rng, &[r, c], false)],
        unary(Primitive::Relu),
    ));
    cases.push((PrimitiveKind::Sigmoid, vec![random(rng, &[r, c])], unary(Primitive::Sigmoid)));
    cases.push((
        PrimitiveKind::Log,
        vec![random_away_from_zero(rng, &[r, c], true)],
        unary(Primitive::Log),
    ));
    cases.push((PrimitiveKind::Exp, vec![random(rng, &[r, c])], unary(Primitive::Exp)));
    cases.push((PrimitiveKind::Softmax, vec![random(rng, &[r, c])], unary(Primitive::Softmax)));
    cases.push((
        PrimitiveKind::LayerNorm,
        vec![random(rng, &[r, c]), random(rng, &[c]), random(rng, &[c])],
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, seed)
        }),
    ));
    for axis in [None, Some(0), Some(1)] {
        cases.push((PrimitiveKind::Sum, vec![random(rng, &[r, c])], unary(Primitive::Sum { axis })));
        cases.push((PrimitiveKind::Mean, vec![random(rng, &[r, c])], unary(Primitive::Mean { axis })));
    }
    // Distinct, well-separated values keep max away from ties.
    let mut perm: Vec<f64> = (0..r * c).map(|i| i as f64 * 0.37).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    for axis in [None, Some(1)] {
        cases.push((
            PrimitiveKind::Max,
            vec![Tensor::new([r, c], perm.clone()).unwrap()],
            unary(Primitive::Max { axis }),
        ));
    }
    cases.push((
        PrimitiveKind::Concat,
        vec![random(rng, &[r, c]), random(rng, &[r, 2])],
        binary(Primitive::Concat { axis: 1 }),
    ));
    cases.push((
        PrimitiveKind::Concat,
        vec![random(rng, &[r, c]), random(rng, &[2, c])],
        binary(Primitive::Concat { axis: 0 }),
    ));
    cases.push((
        PrimitiveKind::Reshape,
        vec![random(rng, &[r, c])],
        unary(Primitive::Reshape { shape: vec![c, r] }),
    ));
    cases.push((
        PrimitiveKind::Transpose,
        vec![random(rng, &[r, c, 2])],
        unary(Primitive::Transpose { perm: vec![2, 0, 1] }),
    ));
    cases.push((
        PrimitiveKind::Upsample2x,
        vec![random(rng, &[r, 2, 2])],
        unary(Primitive::Upsample2x),
    ));
    let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..r)).collect();
    cases.push((
        PrimitiveKind::GatherRows,
        vec![random(rng, &[r, c])],
        unary(Primitive::GatherRows { indices: idx }),
    ));
    cases
}
