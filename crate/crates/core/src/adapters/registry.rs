use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameters split into a frozen and a trainable set.
///
/// Iteration order is lexicographic by name, which keeps checkpoints and
/// optimizer state deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterRegistry {
    params: BTreeMap<String, Param>,
}

impl ParameterRegistry {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) {
        self.params.insert(name.into(), Param { tensor, frozen });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::Registry(format!("no parameter named '{name}'")))
    }

    /// Mutable access to a trainable parameter; frozen ones are refused.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.params.get_mut(name) {
            Some(p) if !p.frozen => Ok(&mut p.tensor),
            Some(_) => Err(Error::Registry(format!("parameter '{name}' is frozen"))),
            None => Err(Error::Registry(format!("no parameter named '{name}'"))),
        }
    }

    /// Overwrites a parameter value regardless of its partition. Intended
    /// for initialization and test fixtures, not for optimizer updates.
    pub fn overwrite(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Registry(format!("no parameter named '{name}'")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::dim("overwrite", p.tensor.shape(), tensor.shape()));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| (k.as_str(), &p.tensor))
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(k, p)| (k.as_str(), &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen().map(|(_, t)| t.numel()).sum()
    }
}
