//! Ordered, named parameter tensors and their binding to a [`Graph`].

use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter tensors in insertion order, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::invalid(format!("missing parameter {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape())).expect("names are unique");
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a graph parameter.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| graph.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Graph variables of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    /// Collects gradients into a [`ParamSet`] laid out like `like`.
    pub fn gradients(&self, grads: &Gradients, like: &ParamSet) -> ParamSet {
        let mut out = like.zeros_like();
        for (slot, &v) in out.tensors.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(v) {
                *slot = g.clone();
            }
        }
        out
    }
}
