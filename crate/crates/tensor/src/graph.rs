//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Every primitive application appends one node; `backward` walks nodes in
//! reverse insertion order, so the graph is acyclic by construction.

use crate::error::{Result, TensorError};
use crate::kernels::{self, Broadcast, ConvGeom, MatRef};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation together with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Rank-2 or batched rank-3 matrix product; a rank-2 rhs broadcasts over the batch.
    MatMul { transpose_a: bool, transpose_b: bool },
    /// Input `[h, w, ci]`, kernel `[k, k, ci, co]`, zero padding of `k / 2`.
    Conv2d { stride: usize },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Relu,
    Sigmoid,
    Log,
    Exp,
    /// Softmax over the last axis.
    Softmax,
    /// Inputs `x, gamma, beta`; normalizes over the last axis.
    LayerNorm { eps: f64 },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: Option<usize> },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    /// Output axis `i` is input axis `perm[i]`.
    Transpose { perm: Vec<usize> },
    /// Nearest-neighbour x2 upsampling of `[h, w, c]`.
    Upsample2x,
    /// Selects rows (first-axis slices) by index.
    GatherRows { indices: Vec<usize> },
}

/// Fieldless discriminant of [`Primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MatMul,
    Conv2d,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Softmax,
    LayerNorm,
    Sum,
    Mean,
    Max,
    Concat,
    Reshape,
    Transpose,
    Upsample2x,
    GatherRows,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Conv2d => "conv2d",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Scale => "scalar-mul",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Log => "log",
            Self::Exp => "exp",
            Self::Softmax => "softmax",
            Self::LayerNorm => "layer-norm",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Concat => "concat",
            Self::Reshape => "reshape",
            Self::Transpose => "transpose",
            Self::Upsample2x => "nearest-upsample",
            Self::GatherRows => "gather-rows",
        }
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Self::MatMul { .. } => PrimitiveKind::MatMul,
            Self::Conv2d { .. } => PrimitiveKind::Conv2d,
            Self::Add => PrimitiveKind::Add,
            Self::Sub => PrimitiveKind::Sub,
            Self::Mul => PrimitiveKind::Mul,
            Self::Div => PrimitiveKind::Div,
            Self::Scale(_) => PrimitiveKind::Scale,
            Self::Relu => PrimitiveKind::Relu,
            Self::Sigmoid => PrimitiveKind::Sigmoid,
            Self::Log => PrimitiveKind::Log,
            Self::Exp => PrimitiveKind::Exp,
            Self::Softmax => PrimitiveKind::Softmax,
            Self::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Self::Sum { .. } => PrimitiveKind::Sum,
            Self::Mean { .. } => PrimitiveKind::Mean,
            Self::Max { .. } => PrimitiveKind::Max,
            Self::Concat { .. } => PrimitiveKind::Concat,
            Self::Reshape { .. } => PrimitiveKind::Reshape,
            Self::Transpose { .. } => PrimitiveKind::Transpose,
            Self::Upsample2x => PrimitiveKind::Upsample2x,
            Self::GatherRows { .. } => PrimitiveKind::GatherRows,
        }
    }
}

/// Per-node data the backward rule needs beyond input and output values.
enum Saved {
    None,
    /// Layer norm: per-row mean and reciprocal standard deviation.
    Norm { mean: Vec<f64>, rstd: Vec<f64> },
    /// Max: flat input index chosen for each output element.
    ArgMax(Vec<usize>),
    /// Broadcast plan of a binary elementwise op.
    Broadcast(Broadcast),
}

enum Op {
    Leaf,
    Prim(Primitive, Saved),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    inputs: Vec<Var>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic graph rebuilt on every forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<PrimitiveKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(kind: PrimitiveKind, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        kind: kind.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn invalid(kind: PrimitiveKind, message: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        kind: kind.name(),
        message: message.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the backward rule of `kind` wrong on purpose (scales its input
    /// gradients by 1.5). Only useful as a negative control for gradient checks.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<PrimitiveKind>) {
        self.fault = kind;
    }

    fn push_leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad || tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_data(),
            inputs: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push_leaf(tensor, rg)
    }

    /// Differentiable leaf holding a copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let t = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("consistent tensor");
        self.push_leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("consistent node")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Drops all gradients so `backward` may run again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Appends one primitive application and returns its output node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let kind = prim.kind();
        let arity = match kind {
            PrimitiveKind::MatMul
            | PrimitiveKind::Conv2d
            | PrimitiveKind::Add
            | PrimitiveKind::Sub
            | PrimitiveKind::Mul
            | PrimitiveKind::Div => Some(2),
            PrimitiveKind::LayerNorm => Some(3),
            PrimitiveKind::Concat => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(invalid(kind, format!("expects {n} inputs, got {}", inputs.len())))
            }
            None if inputs.is_empty() => return Err(invalid(kind, "expects at least one input")),
            _ => {}
        }
        let (shape, value, saved) = self.forward(&prim, inputs)?;
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { kind: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            inputs: inputs.to_vec(),
            op: Op::Prim(prim, saved),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Vec<usize>, Vec<f64>, Saved)> {
        let kind = prim.kind();
        let x = &self.nodes[inputs[0].0];
        match prim {
            Primitive::MatMul {
                transpose_a,
                transpose_b,
            } => {
                let b = &self.nodes[inputs[1].0];
                let dims = MatMulDims::new(&x.shape, &b.shape, *transpose_a, *transpose_b)
                    .ok_or_else(|| mismatch(kind, &[&x.shape, &b.shape]))?;
                let mut out = vec![0.0; dims.batch * dims.m * dims.n];
                for bi in 0..dims.batch {
                    let a = dims.a_view(&x.value, bi);
                    let bv = dims.b_view(&b.value, bi);
                    gemm_block(&dims, a, bv, &mut out[bi * dims.m * dims.n..]);
                }
                Ok((dims.out_shape(), out, Saved::None))
            }
            Primitive::Conv2d { stride } => {
                let w = &self.nodes[inputs[1].0];
                let geom = conv_geom(kind, &x.shape, &w.shape, *stride)?;
                let co = w.shape[3];
                let mut out = vec![0.0; geom.ho * geom.wo * co];
                let rows = geom.ho * geom.wo;
                if geom.is_pointwise() {
                    kernels::gemm(
                        rows,
                        geom.ci,
                        co,
                        MatRef::new(&x.value, geom.ci, false),
                        MatRef::new(&w.value, co, false),
                        0.0,
                        &mut out,
                    );
                } else {
                    let cols = kernels::im2col(&x.value, &geom);
                    kernels::gemm(
                        rows,
                        geom.patch(),
                        co,
                        MatRef::new(&cols, geom.patch(), false),
                        MatRef::new(&w.value, co, false),
                        0.0,
                        &mut out,
                    );
                }
                Ok((vec![geom.ho, geom.wo, co], out, Saved::None))
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let b = &self.nodes[inputs[1].0];
                let plan = Broadcast::new(&x.shape, &b.shape).ok_or_else(|| mismatch(kind, &[&x.shape, &b.shape]))?;
                let mut out = vec![0.0; plan.out_len()];
                let (av, bv) = (&x.value, &b.value);
                match prim {
                    Primitive::Add => plan.for_each(|o, i, j| out[o] = av[i] + bv[j]),
                    Primitive::Sub => plan.for_each(|o, i, j| out[o] = av[i] - bv[j]),
                    Primitive::Mul => plan.for_each(|o, i, j| out[o] = av[i] * bv[j]),
                    _ => plan.for_each(|o, i, j| out[o] = av[i] / bv[j]),
                }
                Ok((plan.out_shape.clone(), out, Saved::Broadcast(plan)))
            }
            Primitive::Scale(s) => Ok((x.shape.clone(), x.value.iter().map(|v| v * s).collect(), Saved::None)),
            Primitive::Relu => Ok((x.shape.clone(), x.value.iter().map(|v| v.max(0.0)).collect(), Saved::None)),
            Primitive::Sigmoid => Ok((
                x.shape.clone(),
                x.value.iter().map(|&v| kernels::sigmoid(v)).collect(),
                Saved::None,
            )),
            Primitive::Log => {
                if x.value.iter().any(|&v| v <= 0.0) {
                    return Err(TensorError::NonFinite { kind: kind.name() });
                }
                Ok((x.shape.clone(), x.value.iter().map(|v| v.ln()).collect(), Saved::None))
            }
            Primitive::Exp => Ok((x.shape.clone(), x.value.iter().map(|v| v.exp()).collect(), Saved::None)),
            Primitive::Softmax => {
                let d = *x.shape.last().ok_or_else(|| mismatch(kind, &[&x.shape]))?;
                let mut out = x.value.clone();
                if d > 0 {
                    for row in out.chunks_mut(d) {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut s = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - m).exp();
                            s += *v;
                        }
                        let inv = 1.0 / s;
                        row.iter_mut().for_each(|v| *v *= inv);
                    }
                }
                Ok((x.shape.clone(), out, Saved::None))
            }
            Primitive::LayerNorm { eps } => {
                let gamma = &self.nodes[inputs[1].0];
                let beta = &self.nodes[inputs[2].0];
                let d = *x.shape.last().ok_or_else(|| mismatch(kind, &[&x.shape]))?;
                if gamma.shape != [d] || beta.shape != [d] || d == 0 {
                    return Err(mismatch(kind, &[&x.shape, &gamma.shape, &beta.shape]));
                }
                let rows = x.value.len() / d;
                let mut out = vec![0.0; x.value.len()];
                let mut mean = Vec::with_capacity(rows);
                let mut rstd = Vec::with_capacity(rows);
                for (r, row) in x.value.chunks(d).enumerate() {
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let rs = 1.0 / (var + eps).sqrt();
                    let o = &mut out[r * d..(r + 1) * d];
                    for i in 0..d {
                        o[i] = (row[i] - mu) * rs * gamma.value[i] + beta.value[i];
                    }
                    mean.push(mu);
                    rstd.push(rs);
                }
                Ok((x.shape.clone(), out, Saved::Norm { mean, rstd }))
            }
            Primitive::Sum { axis } | Primitive::Mean { axis } => {
                let mean = matches!(prim, Primitive::Mean { .. });
                match axis {
                    None => {
                        let n = x.value.len();
                        let s: f64 = x.value.iter().sum();
                        let v = if mean {
                            if n == 0 {
                                return Err(invalid(kind, "mean of an empty tensor"));
                            }
                            s / n as f64
                        } else {
                            s
                        };
                        Ok((Vec::new(), vec![v], Saved::None))
                    }
                    Some(axis) => {
                        let axis = *axis;
                        if axis >= x.shape.len() {
                            return Err(invalid(kind, format!("axis {axis} out of range for {:?}", x.shape)));
                        }
                        let (outer, ext, inner) = split_axis(&x.shape, axis);
                        if mean && ext == 0 {
                            return Err(invalid(kind, "mean over an empty axis"));
                        }
                        let mut out = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for e in 0..ext {
                                let src = &x.value[(o * ext + e) * inner..][..inner];
                                add_into(&mut out[o * inner..(o + 1) * inner], src);
                            }
                        }
                        if mean {
                            let inv = 1.0 / ext as f64;
                            out.iter_mut().for_each(|v| *v *= inv);
                        }
                        let mut shape = x.shape.clone();
                        shape.remove(axis);
                        Ok((shape, out, Saved::None))
                    }
                }
            }
            Primitive::Max { axis } => match axis {
                None => {
                    if x.value.is_empty() {
                        return Err(invalid(kind, "max of an empty tensor"));
                    }
                    let mut best = 0;
                    for (i, &v) in x.value.iter().enumerate() {
                        if v > x.value[best] {
                            best = i;
                        }
                    }
                    Ok((Vec::new(), vec![x.value[best]], Saved::ArgMax(vec![best])))
                }
                Some(axis) => {
                    let axis = *axis;
                    if axis >= x.shape.len() || x.shape[axis] == 0 {
                        return Err(invalid(kind, format!("bad axis {axis} for {:?}", x.shape)));
                    }
                    let (outer, ext, inner) = split_axis(&x.shape, axis);
                    let mut out = vec![0.0; outer * inner];
                    let mut arg = vec![0; outer * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = o * ext * inner + i;
                            for e in 1..ext {
                                let idx = (o * ext + e) * inner + i;
                                if x.value[idx] > x.value[best] {
                                    best = idx;
                                }
                            }
                            out[o * inner + i] = x.value[best];
                            arg[o * inner + i] = best;
                        }
                    }
                    let mut shape = x.shape.clone();
                    shape.remove(axis);
                    Ok((shape, out, Saved::ArgMax(arg)))
                }
            },
            Primitive::Concat { axis } => {
                let axis = *axis;
                let first = &x.shape;
                if axis >= first.len() {
                    return Err(invalid(kind, format!("axis {axis} out of range for {first:?}")));
                }
                let mut total = 0;
                for v in inputs {
                    let s = &self.nodes[v.0].shape;
                    let ok = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                    if !ok {
                        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.nodes[v.0].shape.as_slice()).collect();
                        return Err(mismatch(kind, &shapes));
                    }
                    total += s[axis];
                }
                let (outer, _, inner) = split_axis(first, axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for v in inputs {
                        let n = &self.nodes[v.0];
                        let block = n.shape[axis] * inner;
                        out.extend_from_slice(&n.value[o * block..(o + 1) * block]);
                    }
                }
                let mut shape = first.clone();
                shape[axis] = total;
                Ok((shape, out, Saved::None))
            }
            Primitive::Reshape { shape } => {
                if shape.iter().product::<usize>() != x.value.len() {
                    return Err(mismatch(kind, &[&x.shape, shape]));
                }
                Ok((shape.clone(), x.value.clone(), Saved::None))
            }
            Primitive::Transpose { perm } => {
                let mut seen = vec![false; x.shape.len()];
                let valid = perm.len() == x.shape.len()
                    && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
                if !valid {
                    return Err(invalid(kind, format!("permutation {perm:?} invalid for {:?}", x.shape)));
                }
                let mut out = vec![0.0; x.value.len()];
                kernels::permute_into(&x.value, &x.shape, perm, &mut out, false);
                Ok((perm.iter().map(|&p| x.shape[p]).collect(), out, Saved::None))
            }
            Primitive::Upsample2x => {
                if x.shape.len() != 3 {
                    return Err(mismatch(kind, &[&x.shape]));
                }
                let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
                let mut out = vec![0.0; 4 * h * w * c];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = ((y / 2) * w + xx / 2) * c;
                        let dst = (y * 2 * w + xx) * c;
                        out[dst..dst + c].copy_from_slice(&x.value[src..src + c]);
                    }
                }
                Ok((vec![2 * h, 2 * w, c], out, Saved::None))
            }
            Primitive::GatherRows { indices } => {
                if x.shape.is_empty() {
                    return Err(mismatch(kind, &[&x.shape]));
                }
                let rows = x.shape[0];
                let width: usize = x.shape[1..].iter().product();
                let mut out = Vec::with_capacity(indices.len() * width);
                for &i in indices {
                    if i >= rows {
                        return Err(invalid(kind, format!("row {i} out of range for {rows} rows")));
                    }
                    out.extend_from_slice(&x.value[i * width..(i + 1) * width]);
                }
                let mut shape = x.shape.clone();
                shape[0] = indices.len();
                Ok((shape, out, Saved::None))
            }
        }
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(TensorError::NotScalar(out_node.shape.clone()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !out_node.requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            if let Op::Prim(prim, saved) = &self.nodes[idx].op {
                let mut input_grads = self.backward_node(idx, prim, saved, &gy);
                if self.fault == Some(prim.kind()) {
                    for g in input_grads.iter_mut().flatten() {
                        g.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
                let inputs = self.nodes[idx].inputs.clone();
                for (var, g) in inputs.into_iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match &mut self.grads[var.0] {
                        Some(acc) => add_into(acc, &g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, prim: &Primitive, saved: &Saved, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let x = &self.nodes[ins[0].0];
        let zeros_like = |v: Var| vec![0.0; self.nodes[v.0].value.len()];
        match prim {
            Primitive::MatMul {
                transpose_a,
                transpose_b,
            } => {
                let b = &self.nodes[ins[1].0];
                let dims = MatMulDims::new(&x.shape, &b.shape, *transpose_a, *transpose_b).expect("checked in forward");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let ga = self.wants(ins[0]).then(|| {
                    let mut ga = zeros_like(ins[0]);
                    for bi in 0..dims.batch {
                        let g = MatRef::new(&gy[bi * m * n..][..m * n], n, false);
                        let bsl = dims.b_slice(&b.value, bi);
                        let dst = &mut ga[bi * m * k..][..m * k];
                        if !transpose_a {
                            // dA[m,k] = dC[m,n] * op(B)^T[n,k]
                            let bt = MatRef::new(bsl, if *transpose_b { k } else { n }, !transpose_b);
                            kernels::gemm(m, n, k, g, bt, 1.0, dst);
                        } else {
                            // dA[k,m] = op(B)[k,n] * dC^T[n,m]
                            let bo = MatRef::new(bsl, if *transpose_b { k } else { n }, *transpose_b);
                            let gt = MatRef::new(&gy[bi * m * n..][..m * n], n, true);
                            kernels::gemm(k, n, m, bo, gt, 1.0, dst);
                        }
                    }
                    ga
                });
                let gb = self.wants(ins[1]).then(|| {
                    let mut gb = zeros_like(ins[1]);
                    for bi in 0..dims.batch {
                        let asl = &x.value[bi * m * k..][..m * k];
                        let dst = if dims.b_batched {
                            &mut gb[bi * k * n..][..k * n]
                        } else {
                            &mut gb[..]
                        };
                        if !transpose_b {
                            // dB[k,n] = op(A)^T[k,m] * dC[m,n]
                            let at = MatRef::new(asl, if *transpose_a { m } else { k }, !transpose_a);
                            let g = MatRef::new(&gy[bi * m * n..][..m * n], n, false);
                            kernels::gemm(k, m, n, at, g, 1.0, dst);
                        } else {
                            // dB[n,k] = dC^T[n,m] * op(A)[m,k]
                            let gt = MatRef::new(&gy[bi * m * n..][..m * n], n, true);
                            let ao = MatRef::new(asl, if *transpose_a { m } else { k }, *transpose_a);
                            kernels::gemm(n, m, k, gt, ao, 1.0, dst);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }
            Primitive::Conv2d { stride } => {
                let w = &self.nodes[ins[1].0];
                let geom = conv_geom(PrimitiveKind::Conv2d, &x.shape, &w.shape, *stride).expect("checked in forward");
                let co = w.shape[3];
                let rows = geom.ho * geom.wo;
                let patch = geom.patch();
                let g = MatRef::new(gy, co, false);
                let pointwise = geom.is_pointwise();
                let cols_owned;
                let cols: &[f64] = if pointwise {
                    &x.value
                } else {
                    cols_owned = kernels::im2col(&x.value, &geom);
                    &cols_owned
                };
                let gw = self.wants(ins[1]).then(|| {
                    let mut gw = zeros_like(ins[1]);
                    kernels::gemm(patch, rows, co, MatRef::new(cols, patch, true), g, 1.0, &mut gw);
                    gw
                });
                let gx = self.wants(ins[0]).then(|| {
                    let mut gx = zeros_like(ins[0]);
                    if pointwise {
                        kernels::gemm(rows, co, patch, g, MatRef::new(&w.value, co, true), 1.0, &mut gx);
                    } else {
                        let mut dcols = vec![0.0; rows * patch];
                        kernels::gemm(rows, co, patch, g, MatRef::new(&w.value, co, true), 0.0, &mut dcols);
                        kernels::col2im_add(&dcols, &geom, &mut gx);
                    }
                    gx
                });
                vec![gx, gw]
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let Saved::Broadcast(plan) = saved else {
                    unreachable!("binary op without broadcast plan")
                };
                let b = &self.nodes[ins[1].0];
                let (av, bv) = (&x.value, &b.value);
                let ga = self.wants(ins[0]).then(|| {
                    let mut ga = zeros_like(ins[0]);
                    match prim {
                        Primitive::Add | Primitive::Sub => plan.for_each(|o, i, _| ga[i] += gy[o]),
                        Primitive::Mul => plan.for_each(|o, i, j| ga[i] += gy[o] * bv[j]),
                        _ => plan.for_each(|o, i, j| ga[i] += gy[o] / bv[j]),
                    }
                    ga
                });
                let gb = self.wants(ins[1]).then(|| {
                    let mut gb = zeros_like(ins[1]);
                    match prim {
                        Primitive::Add => plan.for_each(|o, _, j| gb[j] += gy[o]),
                        Primitive::Sub => plan.for_each(|o, _, j| gb[j] -= gy[o]),
                        Primitive::Mul => plan.for_each(|o, i, j| gb[j] += gy[o] * av[i]),
                        _ => plan.for_each(|o, i, j| gb[j] -= gy[o] * av[i] / (bv[j] * bv[j])),
                    }
                    gb
                });
                vec![ga, gb]
            }
            Primitive::Scale(s) => vec![Some(gy.iter().map(|g| g * s).collect())],
            Primitive::Relu => vec![Some(
                gy.iter()
                    .zip(&x.value)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Primitive::Sigmoid => vec![Some(gy.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Primitive::Log => vec![Some(gy.iter().zip(&x.value).map(|(g, v)| g / v).collect())],
            Primitive::Exp => vec![Some(gy.iter().zip(&node.value).map(|(g, y)| g * y).collect())],
            Primitive::Softmax => {
                let d = *x.shape.last().unwrap_or(&1);
                let mut gx = vec![0.0; gy.len()];
                if d > 0 {
                    for ((gxr, gyr), yr) in gx.chunks_mut(d).zip(gy.chunks(d)).zip(node.value.chunks(d)) {
                        let dot: f64 = gyr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for i in 0..d {
                            gxr[i] = yr[i] * (gyr[i] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Primitive::LayerNorm { .. } => {
                let Saved::Norm { mean, rstd } = saved else {
                    unreachable!("layer norm without statistics")
                };
                let gamma = &self.nodes[ins[1].0].value;
                let d = gamma.len();
                let mut gx = vec![0.0; x.value.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for r in 0..mean.len() {
                    let row = &x.value[r * d..(r + 1) * d];
                    let gyr = &gy[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for i in 0..d {
                        xhat[i] = (row[i] - mean[r]) * rstd[r];
                        gxhat[i] = gyr[i] * gamma[i];
                        ggamma[i] += gyr[i] * xhat[i];
                        gbeta[i] += gyr[i];
                        mean_g += gxhat[i];
                        mean_gx += gxhat[i] * xhat[i];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for i in 0..d {
                        out[i] = rstd[r] * (gxhat[i] - mean_g - xhat[i] * mean_gx);
                    }
                }
                vec![
                    self.wants(ins[0]).then_some(gx),
                    self.wants(ins[1]).then_some(ggamma),
                    self.wants(ins[2]).then_some(gbeta),
                ]
            }
            Primitive::Sum { axis } | Primitive::Mean { axis } => {
                let mean = matches!(prim, Primitive::Mean { .. });
                let mut gx = vec![0.0; x.value.len()];
                match axis {
                    None => {
                        let g = if mean { gy[0] / x.value.len() as f64 } else { gy[0] };
                        gx.iter_mut().for_each(|v| *v = g);
                    }
                    Some(axis) => {
                        let (outer, ext, inner) = split_axis(&x.shape, *axis);
                        let scale = if mean { 1.0 / ext as f64 } else { 1.0 };
                        for o in 0..outer {
                            for e in 0..ext {
                                let dst = &mut gx[(o * ext + e) * inner..][..inner];
                                for (d, g) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                                    *d = g * scale;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Max { .. } => {
                let Saved::ArgMax(arg) = saved else {
                    unreachable!("max without argmax")
                };
                let mut gx = vec![0.0; x.value.len()];
                for (g, &i) in gy.iter().zip(arg) {
                    gx[i] += g;
                }
                vec![Some(gx)]
            }
            Primitive::Concat { axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                let mut grads = Vec::with_capacity(ins.len());
                for v in ins {
                    let n = &self.nodes[v.0];
                    let block = n.shape[*axis] * inner;
                    if n.requires_grad {
                        let mut g = Vec::with_capacity(n.value.len());
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            g.extend_from_slice(&gy[start..start + block]);
                        }
                        grads.push(Some(g));
                    } else {
                        grads.push(None);
                    }
                    offset += block;
                }
                grads
            }
            Primitive::Reshape { .. } => vec![Some(gy.to_vec())],
            Primitive::Transpose { perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let mut gx = vec![0.0; gy.len()];
                kernels::permute_into(gy, &node.shape, &inverse, &mut gx, false);
                vec![Some(gx)]
            }
            Primitive::Upsample2x => {
                let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
                let mut gx = vec![0.0; x.value.len()];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let dst = ((y / 2) * w + xx / 2) * c;
                        let src = (y * 2 * w + xx) * c;
                        add_into(&mut gx[dst..dst + c], &gy[src..src + c]);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::GatherRows { indices } => {
                let width: usize = x.shape[1..].iter().product();
                let mut gx = vec![0.0; x.value.len()];
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gx[i * width..(i + 1) * width], &gy[r * width..(r + 1) * width]);
                }
                vec![Some(gx)]
            }
        }
    }
}

fn conv_geom(kind: PrimitiveKind, x: &[usize], w: &[usize], stride: usize) -> Result<ConvGeom> {
    if x.len() != 3 || w.len() != 4 || w[0] != w[1] || w[2] != x[2] || w[0] % 2 == 0 {
        return Err(mismatch(kind, &[x, w]));
    }
    if stride != 1 && stride != 2 {
        return Err(invalid(kind, format!("stride must be 1 or 2, got {stride}")));
    }
    let k = w[0];
    let pad = k / 2;
    Ok(ConvGeom {
        h: x[0],
        w: x[1],
        ci: x[2],
        k,
        stride,
        pad,
        ho: kernels::conv_out(x[0], k, stride, pad),
        wo: kernels::conv_out(x[1], k, stride, pad),
    })
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    transpose_a: bool,
    transpose_b: bool,
}

impl MatMulDims {
    fn new(a: &[usize], b: &[usize], transpose_a: bool, transpose_b: bool) -> Option<Self> {
        let (batch, a_batched, b_batched) = match (a.len(), b.len()) {
            (2, 2) => (1, false, false),
            (3, 3) if a[0] == b[0] => (a[0], true, true),
            (3, 2) => (a[0], true, false),
            _ => return None,
        };
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, ka) = if transpose_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        (ka == kb).then_some(Self {
            batch,
            m,
            k: ka,
            n,
            a_batched,
            b_batched,
            transpose_a,
            transpose_b,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }

    fn b_slice<'a>(&self, b: &'a [f64], bi: usize) -> &'a [f64] {
        if self.b_batched {
            &b[bi * self.k * self.n..][..self.k * self.n]
        } else {
            b
        }
    }

    fn a_view<'a>(&self, a: &'a [f64], bi: usize) -> MatRef<'a> {
        let sl = &a[bi * self.m * self.k..][..self.m * self.k];
        MatRef::new(sl, if self.transpose_a { self.m } else { self.k }, self.transpose_a)
    }

    fn b_view<'a>(&self, b: &'a [f64], bi: usize) -> MatRef<'a> {
        let sl = self.b_slice(b, bi);
        MatRef::new(sl, if self.transpose_b { self.k } else { self.n }, self.transpose_b)
    }
}

fn gemm_block(dims: &MatMulDims, a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    kernels::gemm(dims.m, dims.k, dims.n, a, b, 0.0, out);
}
