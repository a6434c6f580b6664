//! Parameter bundles for the building blocks shared by encoder and decoder.

use clickvos_tensor::{
    multi_head_attention, AttentionWeights, BoundParams, Graph, ParamId, ParamStore, Var, LAYER_NORM_EPS,
};
use rand::Rng;

use crate::error::Result;

/// `k x k` convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (2.0 / (k * k * ci) as f64).sqrt();
        Ok(Self {
            w: store.insert_normal(format!("{name}.w"), [k, k, ci, co], std, rng)?,
            b: store.insert_const(format!("{name}.b"), [co], 0.0)?,
            stride,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), self.stride)?;
        Ok(g.add(y, p.var(self.b))?)
    }
}

/// Fully connected layer over the last axis of a rank-2 input.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn register(store: &mut ParamStore, name: &str, ci: usize, co: usize, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        let std = (gain / ci as f64).sqrt();
        Ok(Self {
            w: store.insert_normal(format!("{name}.w"), [ci, co], std, rng)?,
            b: store.insert_const(format!("{name}.b"), [co], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.var(self.w), Some(p.var(self.b)))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn register(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert_const(format!("{name}.gamma"), [c], 1.0)?,
            beta: store.insert_const(format!("{name}.beta"), [c], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)?)
    }
}

/// `relu(skip(x) + conv(relu(conv(x))))`, with a 1x1 projection on the skip
/// path when the width changes.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
    pub proj: Option<Conv>,
}

impl ResBlock {
    pub fn register(store: &mut ParamStore, name: &str, ci: usize, co: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            c1: Conv::register(store, &format!("{name}.c1"), 3, ci, co, 1, rng)?,
            c2: Conv::register(store, &format!("{name}.c2"), 3, co, co, 1, rng)?,
            proj: if ci == co {
                None
            } else {
                Some(Conv::register(store, &format!("{name}.proj"), 1, ci, co, 1, rng)?)
            },
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.c1.apply(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.c2.apply(g, p, h)?;
        let skip = match &self.proj {
            Some(c) => c.apply(g, p, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y)?)
    }
}

/// Pre-norm residual self-attention: `x + MHA(LN(x), LN(x), LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttn {
    pub norm: Norm,
    pub attn: AttentionWeights,
}

impl SelfAttn {
    pub fn register(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm: Norm::register(store, &format!("{name}.ln"), c)?,
            attn: AttentionWeights::register(store, &format!("{name}.attn"), c, heads, rng)?,
        })
    }

    /// `x` is `[L, C]`.
    pub fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let n = self.norm.apply(g, p, x)?;
        let a = multi_head_attention(g, n, n, n, &self.attn.bind(p))?;
        Ok(g.add(x, a)?)
    }
}

/// Pre-norm residual cross-attention: `q + MHA(LN_q(q), LN_k(k), v')` where
/// `v'` is `LN_k(v)` when the values are normalised and raw `v` otherwise.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttn {
    pub norm_q: Norm,
    pub norm_k: Norm,
    pub attn: AttentionWeights,
    pub normalize_values: bool,
}

impl CrossAttn {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        heads: usize,
        normalize_values: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: Norm::register(store, &format!("{name}.ln_q"), c)?,
            norm_k: Norm::register(store, &format!("{name}.ln_k"), c)?,
            attn: AttentionWeights::register(store, &format!("{name}.attn"), c, heads, rng)?,
            normalize_values,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &BoundParams, q: Var, k: Var, v: Var) -> Result<Var> {
        let qn = self.norm_q.apply(g, p, q)?;
        let kn = self.norm_k.apply(g, p, k)?;
        let vn = if !self.normalize_values {
            v
        } else if v == k {
            kn
        } else {
            self.norm_k.apply(g, p, v)?
        };
        let a = multi_head_attention(g, qn, kn, vn, &self.attn.bind(p))?;
        Ok(g.add(q, a)?)
    }
}
