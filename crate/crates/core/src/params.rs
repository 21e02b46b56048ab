//! Named parameter and buffer storage.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), each keyed by a stable dotted path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn add_param(&mut self, path: impl Into<String>, value: Tensor) -> ParamId {
        let (idx, prev) = self.params.insert_full(path.into(), value);
        debug_assert!(prev.is_none(), "duplicate parameter path");
        ParamId(idx)
    }

    pub fn add_buffer(&mut self, path: impl Into<String>, value: Tensor) -> BufferId {
        let (idx, prev) = self.buffers.insert_full(path.into(), value);
        debug_assert!(prev.is_none(), "duplicate buffer path");
        BufferId(idx)
    }

    /// Fan-in scaled normal initialization, `N(0, 1 / fan_in)`.
    pub fn add_fan_in_normal<R: Rng>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add_param(path, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Overwrites a parameter or buffer by path, checking the shape.
    pub fn assign(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(path)
            .or_else(|| self.buffers.get_mut(path))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{path}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{path}` has shape {:?}, checkpoint holds {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// SHA-256 over every path, shape, and value, in storage order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().chain(self.buffers.iter()) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
