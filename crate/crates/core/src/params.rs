//! Named model parameters with gradient accumulators.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// One named parameter. Names are dotted paths like
/// `unet.down.2.conv1.weight`; within a store they are unique and define the
/// serialization order.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Flat collection of parameters addressed by index, with a name lookup.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; the returned index is stable for the lifetime of
    /// the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoreError::invalid(
                "params.add",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Add `delta` into the gradient accumulator of `idx`.
    pub fn accumulate_grad(&mut self, idx: usize, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[idx];
        match &mut p.grad {
            Some(g) => {
                *g = g.add(delta)?;
            }
            None => p.grad = Some(delta.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Indices in serialization order (sorted by name).
    pub fn sorted_indices(&self) -> Vec<usize> {
        self.by_name.values().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Total scalar values across parameters whose name starts with `prefix`.
    pub fn values_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}
