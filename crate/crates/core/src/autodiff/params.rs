use std::collections::BTreeMap;
use std::sync::Arc;

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, kept in name order.
///
/// Tensors are shared with any graph they are attached to; mutation
/// copies on write while such a graph is alive.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

/// Graph nodes of a [`ParamStore`] after it has been placed on a graph.
#[derive(Clone, Debug, Default)]
pub struct ParamHandles {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamHandles {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::param(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, Arc::new(t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors
            .remove(name)
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|t| (*t).clone()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k, &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k, Arc::make_mut(v)))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Keep only tensors whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    /// Register every tensor as a trainable leaf on `graph`.
    pub fn attach(&self, graph: &mut Graph<T>) -> Result<ParamHandles> {
        self.attach_with(graph, |_| true)
    }

    /// Register tensors as constants: they take part in the forward pass
    /// but receive no gradient.
    pub fn attach_frozen(&self, graph: &mut Graph<T>) -> Result<ParamHandles> {
        self.attach_with(graph, |_| false)
    }

    /// Trainable leaves for names accepted by `trainable`, constants for the
    /// rest.
    pub fn attach_with(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Result<ParamHandles> {
        let mut nodes = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = if trainable(name) {
                graph.param_shared(name, t.clone(), false)?
            } else {
                graph.input_trusted(t.clone())?
            };
            nodes.insert(name.clone(), id);
        }
        Ok(ParamHandles { nodes })
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }
}
