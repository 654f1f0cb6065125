//! Named parameter storage (the learnable set of the model).

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-parameter gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// Every learnable tensor, keyed by a stable hierarchical name such as
/// `enc.0.attn.q.w`. Iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Put every tensor on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Gradient per parameter; parameters the loss does not reach get zeros.
    pub fn collect_grads<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
    ) -> Result<ParamGrads<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            let g = match grads.take(v) {
                Some(g) => g,
                None => Tensor::zeros(store.get(name)?.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
