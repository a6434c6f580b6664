//! Convenience wrappers over [`Graph::apply`].

use crate::error::Result;
use crate::graph::{Graph, Primitive, Var};

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            Primitive::MatMul {
                transpose_a: false,
                transpose_b: false,
            },
            &[a, b],
        )
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            Primitive::MatMul {
                transpose_a: false,
                transpose_b: true,
            },
            &[a, b],
        )
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride }, &[x, kernel])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Primitive::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[x])
    }

    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Primitive::Max { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape: shape.into() }, &[x])
    }

    pub fn transpose(&mut self, x: Var, perm: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Transpose { perm: perm.into() }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Upsample2x, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, indices: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices: indices.into() }, &[x])
    }

    /// `x * weight + bias` over the last axis of a rank-2 input.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}
