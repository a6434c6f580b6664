//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are copied into the graph as leaves; after
//! [`Graph::backward`] their gradients are accumulated back into the store.

mod attention;
pub mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod optim;
mod params;
mod tensor;

pub use attention::{multi_head_attention, multi_head_attention_with_weights, AttentionParams, AttentionWeights};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputCheck};
pub use graph::{Graph, Primitive, PrimitiveKind, Var};
pub use optim::Adam;
pub use params::{BoundParams, ParamId, ParamStore};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
