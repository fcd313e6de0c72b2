use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tensor::{Real, Tensor};
use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter tensors plus non-learnable buffers (running statistics).
///
/// Iteration order is the lexicographic order of names, which keeps every
/// consumer (optimiser, checkpoints, hashing) deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(arg_err!("duplicate parameter name {name}"));
        }
        self.params.insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.buffers.contains_key(name) {
            return Err(arg_err!("duplicate buffer name {name}"));
        }
        self.buffers.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| arg_err!("missing parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| arg_err!("missing parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| arg_err!("missing buffer {name}"))
    }

    pub fn set_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| arg_err!("missing buffer {name}"))?;
        if slot.shape() != tensor.shape() {
            return Err(arg_err!("buffer {name} shape change {:?} -> {:?}", slot.shape().0, tensor.shape().0));
        }
        *slot = tensor;
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(|k| k.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.data().len()).sum()
    }

    /// Merges another store; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.params {
            self.insert(&k, v.tensor, v.trainable)?;
        }
        for (k, v) in other.buffers {
            self.insert_buffer(&k, v)?;
        }
        Ok(())
    }

    /// Converts the element type of every tensor.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}
