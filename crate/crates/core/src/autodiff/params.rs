use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(NamedTensor { name, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn at(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.value.max_abs()))
    }

    /// Registers every parameter as a differentiable leaf, in order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| graph.leaf(e.value.clone()))
            .collect()
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| graph.constant(e.value.clone()))
            .collect()
    }

    pub fn into_entries(self) -> Vec<NamedTensor> {
        self.entries
    }

    pub fn from_entries(entries: Vec<NamedTensor>) -> Result<Self> {
        let mut set = ParamSet::new();
        for e in entries {
            set.insert(e.name, e.value)?;
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_ordered() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        p.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(p.insert("b", Tensor::scalar(3.0)).is_err());
        let names: Vec<_> = p.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.get("a").unwrap().item(), 2.0);
    }
}
