//! Per-request key/value cache with an explicit slot-to-position map, so a
//! sequence prefilled on a non-contiguous subset of positions keeps its
//! original position ids.

use crate::config::ModelConfig;
use crate::error::{Error, Result};

struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
}

pub struct KVCache {
    layers: Vec<LayerKv>,
    /// Slot index -> original position id, strictly increasing.
    positions: Vec<usize>,
    capacity: usize,
    kv_dim: usize,
    head_dim: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig, capacity: usize) -> Self {
        let kv_dim = config.kv_dim();
        KVCache {
            layers: (0..config.num_layers)
                .map(|_| LayerKv {
                    keys: Vec::with_capacity(capacity * kv_dim),
                    values: Vec::with_capacity(capacity * kv_dim),
                })
                .collect(),
            positions: Vec::with_capacity(capacity),
            capacity,
            kv_dim,
            head_dim: config.head_dim,
        }
    }

    /// Number of filled slots.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Width of one slot's keys (or values) across all KV heads.
    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    /// The slot-to-position map.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Largest position currently cached.
    pub fn max_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    /// Slot holding `position`, if cached.
    pub fn slot_of_position(&self, position: usize) -> Option<usize> {
        self.positions.binary_search(&position).ok()
    }

    /// Claim the next slot for `position`. Positions must strictly increase.
    pub(crate) fn push_position(&mut self, position: usize) -> Result<usize> {
        if let Some(max) = self.max_position() {
            if position <= max {
                return Err(Error::Position(format!(
                    "position {position} not greater than cached max {max}"
                )));
            }
        }
        if self.positions.len() >= self.capacity {
            return Err(Error::Capacity(format!(
                "cache holds {} of {} slots",
                self.positions.len(),
                self.capacity
            )));
        }
        self.positions.push(position);
        Ok(self.positions.len() - 1)
    }

    /// Append one token's keys and values for `layer`. Must follow the
    /// `push_position` that claimed the slot.
    pub(crate) fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        debug_assert_eq!(k.len(), self.kv_dim);
        debug_assert_eq!(v.len(), self.kv_dim);
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(k);
        l.values.extend_from_slice(v);
        debug_assert!(l.keys.len() <= self.positions.len() * self.kv_dim);
    }

    /// Key vector of `kv_head` at `slot` in `layer`.
    pub fn key(&self, layer: usize, kv_head: usize, slot: usize) -> &[f32] {
        let start = slot * self.kv_dim + kv_head * self.head_dim;
        &self.layers[layer].keys[start..start + self.head_dim]
    }

    /// Value vector of `kv_head` at `slot` in `layer`.
    pub fn value(&self, layer: usize, kv_head: usize, slot: usize) -> &[f32] {
        let start = slot * self.kv_dim + kv_head * self.head_dim;
        &self.layers[layer].values[start..start + self.head_dim]
    }
}
