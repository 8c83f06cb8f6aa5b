//! Named parameter arrays plus non-trainable buffers (batchnorm running
//! statistics).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Updated outside of gradient descent; not counted as a parameter.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered collection of named tensors. Iteration order is insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Config(format!("missing parameter {name}"))),
        }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut().filter(|e| e.kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds every trainable tensor to `graph` as a parameter leaf.
    pub fn bind<'a>(&'a self, graph: &mut Graph<T>) -> Bound<'a, T> {
        let nodes = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => Some(graph.param(e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { store: self, nodes }
    }
}

/// A parameter store attached to one graph.
#[derive(Debug)]
pub struct Bound<'a, T> {
    store: &'a ParameterStore<T>,
    nodes: Vec<Option<NodeId>>,
}

impl<'a, T: Real> Bound<'a, T> {
    /// Graph node of a trainable parameter.
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.store
            .index
            .get(name)
            .and_then(|&i| self.nodes[i])
            .ok_or_else(|| Error::Config(format!("missing trainable parameter {name}")))
    }

    /// Current value of a buffer or parameter.
    pub fn value(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.store.get(name)
    }

    pub fn store(&self) -> &'a ParameterStore<T> {
        self.store
    }

    /// Gradients of all trainable parameters in store order; zeros where the
    /// backward pass did not reach.
    pub fn gradients(&self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .flatten()
            .map(|&id| graph.grad_or_zeros(id))
            .collect()
    }
}
