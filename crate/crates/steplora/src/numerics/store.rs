//! Named parameter tensors with trainable flags and gradient buffers.
//!
//! Tensors live in a sorted map so checkpoint layout and gradient walks are
//! order-deterministic. Gradients accumulate until explicitly zeroed; frozen
//! tensors never receive gradient, so their buffers stay exactly zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.grad)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    /// Mark exactly the tensors whose names satisfy `pred` as trainable.
    pub fn set_trainable_where<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = pred(name);
        }
    }

    /// Accumulate into a trainable tensor's gradient buffer. Frozen tensors
    /// are skipped so their buffers stay exactly zero.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.trainable {
            p.grad.add_assign(delta)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Count of scalars across tensors whose names satisfy `pred`.
    pub fn scalar_count_where<F: Fn(&str) -> bool>(&self, pred: F) -> usize {
        self.entries
            .iter()
            .filter(|(name, _)| pred(name))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Little-endian byte image of the selected tensor values, in sorted name
    /// order. Used for frozen-tensor audits and checkpoint blobs.
    pub fn bytes_where<F: Fn(&str) -> bool>(&self, pred: F) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.entries {
            if pred(name) {
                out.extend_from_slice(&p.value.to_le_bytes());
            }
        }
        out
    }

    pub fn all_frozen_grads_zero(&self) -> bool {
        self.entries
            .values()
            .filter(|p| !p.trainable)
            .all(|p| p.grad.data().iter().all(|&v| v == 0.0))
    }
}
