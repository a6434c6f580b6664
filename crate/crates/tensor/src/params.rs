use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Identifies one entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument {
                kind: "params",
                message: format!("duplicate parameter name {name}"),
            });
        }
        tensor.requires_grad = true;
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter into `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| graph.param(t)).collect(),
        }
    }

    /// Places every parameter into `graph` as a constant (no gradients).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| graph.constant(t.clone())).collect(),
        }
    }

    /// Adds the graph's gradients for `bound` into each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &BoundParams) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            match graph.grad(v) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    if t.grad.is_none() {
                        t.grad = Some(vec![0.0; t.numel()]);
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values from `(name, tensor)` records; every parameter must be covered
    /// with a matching shape.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.tensors.len()];
        for (name, t) in records {
            let id = self.id(&name).ok_or_else(|| TensorError::InvalidArgument {
                kind: "params",
                message: format!("unknown parameter {name}"),
            })?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    kind: "params",
                    shapes: vec![self.tensors[id.0].shape().to_vec(), t.shape().to_vec()],
                });
            }
            self.tensors[id.0].data_mut().copy_from_slice(t.data());
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::InvalidArgument {
                kind: "params",
                message: format!("missing parameter {}", self.names[i]),
            });
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
