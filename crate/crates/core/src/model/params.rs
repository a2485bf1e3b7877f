use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters are constants in the graph and never updated.
    pub frozen: bool,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub(crate) fn add(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }

    /// `true` at every frozen parameter, in registration order.
    pub fn freeze_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.frozen).collect()
    }

    pub fn set_frozen_where(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = pred(&p.name);
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Overwrites parameter values in order; shapes must match.
    pub fn set_tensors(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(shape_err(
                "set_tensors",
                format!("{} tensors for {} parameters", tensors.len(), self.params.len()),
            ));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(shape_err(
                    "set_tensors",
                    format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), t.shape()),
                ));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Inserts every parameter into `graph` as a leaf. Trainable parameters
    /// require gradients when `grad` is set; frozen ones are constants.
    pub fn bind(&self, graph: &mut Graph<T>, grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor.clone().with_requires_grad(grad && !p.frozen);
                graph.leaf(t)
            })
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
