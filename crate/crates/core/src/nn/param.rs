use std::collections::HashMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A trainable tensor with its accumulated gradient.
///
/// `grad` is only ever reset by an explicit [`ParamStore::zero_grads`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat, ordered list of uniquely named parameters. Layers refer to their
/// parameters by index into the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: impl Into<String>, value: Tensor) -> usize {
        let id = id.into();
        assert!(!self.index.contains_key(&id), "duplicate parameter id `{id}`");
        let slot = self.params.len();
        self.index.insert(id.clone(), slot);
        self.params.push(Param {
            id,
            grad: Tensor::zeros_like(&value),
            value,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.params[slot].value
    }

    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Param> {
        self.find(id).map(|i| &self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Replaces a parameter value, checking the shape.
    pub fn set_value(&mut self, id: &str, value: Tensor) -> Result<()> {
        let slot = self.find(id).ok_or_else(|| Error::MissingParam(id.to_string()))?;
        let p = &mut self.params[slot];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!("parameter `{id}`"), p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Fresh zeroed gradient buffers aligned with the store's slots.
    pub fn grad_buffers(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros_like(&p.value)).collect()
    }

    /// Adds externally computed gradients into each `Param::grad`.
    pub fn accumulate(&mut self, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer count");
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.add_assign(g);
        }
    }
}
