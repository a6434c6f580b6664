//! Multi-head scaled dot-product attention built from graph primitives.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

/// Projection weights of one attention layer, bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionParams {
    pub fn new(d_model: usize, n_heads: usize, w_q: Var, w_k: Var, w_v: Var, w_o: Var) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(TensorError::InvalidArgument {
                kind: "attention",
                message: format!("d_model {d_model} not divisible by {n_heads} heads"),
            });
        }
        Ok(Self {
            d_model,
            n_heads,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Per-head key width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter-store ids of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub d_model: usize,
    pub n_heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttentionWeights {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(TensorError::InvalidArgument {
                kind: "attention",
                message: format!("d_model {d_model} not divisible by {n_heads} heads"),
            });
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = |name: &str| store.insert_normal(format!("{prefix}.{name}"), [d_model, d_model], std, rng);
        Ok(Self {
            d_model,
            n_heads,
            w_q: w("w_q")?,
            w_k: w("w_k")?,
            w_v: w("w_v")?,
            w_o: w("w_o")?,
        })
    }

    pub fn bind(&self, bound: &BoundParams) -> AttentionParams {
        AttentionParams {
            d_model: self.d_model,
            n_heads: self.n_heads,
            w_q: bound.var(self.w_q),
            w_k: bound.var(self.w_k),
            w_v: bound.var(self.w_v),
            w_o: bound.var(self.w_o),
        }
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` per head with all four projections applied.
///
/// `q_src` is `[L, C]`, `k_src` and `v_src` are `[S, C]`; the result is `[L, C]`.
pub fn multi_head_attention(g: &mut Graph, q_src: Var, k_src: Var, v_src: Var, p: &AttentionParams) -> Result<Var> {
    multi_head_attention_with_weights(g, q_src, k_src, v_src, p).map(|(out, _)| out)
}

/// Same as [`multi_head_attention`], also returning the `[heads, L, S]` weights.
pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    q_src: Var,
    k_src: Var,
    v_src: Var,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    let c = p.d_model;
    let (qs, ks, vs) = (g.shape(q_src).to_vec(), g.shape(k_src).to_vec(), g.shape(v_src).to_vec());
    let ok = qs.len() == 2 && ks.len() == 2 && vs.len() == 2 && qs[1] == c && ks[1] == c && vs[1] == c;
    if !ok || ks[0] != vs[0] {
        return Err(TensorError::ShapeMismatch {
            kind: "attention",
            shapes: vec![qs, ks, vs],
        });
    }
    let (l, s, h, dk) = (qs[0], ks[0], p.n_heads, p.d_k());

    let q = g.matmul(q_src, p.w_q)?;
    let q = g.scale(q, 1.0 / (dk as f64).sqrt())?;
    let k = g.matmul(k_src, p.w_k)?;
    let v = g.matmul(v_src, p.w_v)?;

    let (q, k, v) = if h == 1 {
        (q, k, v)
    } else {
        let q = g.reshape(q, [l, h, dk])?;
        let q = g.transpose(q, [1, 0, 2])?;
        let k = g.reshape(k, [s, h, dk])?;
        let k = g.transpose(k, [1, 0, 2])?;
        let v = g.reshape(v, [s, h, dk])?;
        let v = g.transpose(v, [1, 0, 2])?;
        (q, k, v)
    };
    let logits = g.matmul_nt(q, k)?;
    let weights = g.softmax(logits)?;
    let heads = g.matmul(weights, v)?;
    let merged = if h == 1 {
        heads
    } else {
        let t = g.transpose(heads, [1, 0, 2])?;
        g.reshape(t, [l, c])?
    };
    let out = g.matmul(merged, p.w_o)?;
    let weights = if h == 1 { g.reshape(weights, [1, l, s])? } else { weights };
    Ok((out, weights))
}
