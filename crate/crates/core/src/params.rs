//! Named parameter storage and graph binding.

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers such as batchnorm running statistics are stored alongside
    /// weights but are not optimized.
    pub trainable: bool,
}

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            tensor,
            trainable,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Adds every parameter to `g`. Trainable ones track gradients when
    /// `track` is set; buffers never do.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_grad(track && p.trainable)))
            .collect();
        Bound {
            names: self.entries.iter().map(|p| p.name.clone()).collect(),
            vars,
        }
    }
}

/// Graph handles for a bound [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    /// Names existing graph variables, e.g. leaves created by a gradient
    /// checker.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len(), "one variable per name");
        Bound { names, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    /// Gradients for every bound parameter, in store order.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}
