use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, insertion-ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.tensors.insert_full(name, tensor);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.tensors
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("?")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                id.0,
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}
