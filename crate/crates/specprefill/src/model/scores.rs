//! Attention scores of captured query rows against cached keys.
//!
//! For each captured row the softmax runs over *all* keys visible to that row
//! (the context plus any earlier decoded tokens), then the result is sliced
//! to the first `M` context entries without renormalization. Grouped-query
//! attention maps query head `h` to kv head `h / (H / H')`.

use super::{CapturedQueries, KVCache};
use crate::error::{Error, Result};
use crate::math;

/// Scores shaped `[N_rows, L, M, H]` with a per-row validity mask. Invalid
/// rows are zero-filled.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    data: Vec<f32>,
    num_rows: usize,
    num_layers: usize,
    context_len: usize,
    num_heads: usize,
    valid: Vec<bool>,
}

impl AttentionTensor {
    pub fn new(num_rows: usize, num_layers: usize, context_len: usize, num_heads: usize) -> Self {
        AttentionTensor {
            data: vec![0.0; num_rows * num_layers * context_len * num_heads],
            num_rows,
            num_layers,
            context_len,
            num_heads,
            valid: vec![false; num_rows],
        }
    }

    /// Build from explicit values in `[N, L, S, H]` order, all rows valid.
    pub fn from_values(
        data: Vec<f32>,
        num_rows: usize,
        num_layers: usize,
        context_len: usize,
        num_heads: usize,
    ) -> Self {
        assert_eq!(data.len(), num_rows * num_layers * context_len * num_heads);
        AttentionTensor {
            data,
            num_rows,
            num_layers,
            context_len,
            num_heads,
            valid: vec![true; num_rows],
        }
    }

    fn index(&self, row: usize, layer: usize, token: usize, head: usize) -> usize {
        ((row * self.num_layers + layer) * self.context_len + token) * self.num_heads + head
    }

    pub fn get(&self, row: usize, layer: usize, token: usize, head: usize) -> f32 {
        self.data[self.index(row, layer, token, head)]
    }

    pub fn set(&mut self, row: usize, layer: usize, token: usize, head: usize, v: f32) {
        let i = self.index(row, layer, token, head);
        self.data[i] = v;
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.valid[row]
    }

    pub fn set_valid(&mut self, row: usize, valid: bool) {
        self.valid[row] = valid;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Multiply every score by a constant (sensitivity experiments).
    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// Softmax scores of each captured row against the first `context_len` cached
/// keys. Accumulates dot products and softmax sums in f64 with max
/// subtraction.
pub fn attention_scores(
    captured: &CapturedQueries,
    cache: &KVCache,
    context_len: usize,
) -> Result<AttentionTensor> {
    if context_len == 0 {
        return Err(Error::InvalidArgument("context_len must be >= 1".into()));
    }
    if context_len > cache.len() {
        return Err(Error::InvalidArgument(format!(
            "context_len {} exceeds cached length {}",
            context_len,
            cache.len()
        )));
    }
    let layers = captured.num_layers();
    let heads = captured.num_heads();
    let head_dim = captured.head_dim();
    if head_dim == 0 || cache.kv_dim() % head_dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "cache kv width {} incompatible with head_dim {head_dim}",
            cache.kv_dim()
        )));
    }
    let kv_heads = cache.kv_dim() / head_dim;
    if kv_heads == 0 || heads % kv_heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{heads} query heads not divisible by {kv_heads} kv heads"
        )));
    }
    let group = heads / kv_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut out = AttentionTensor::new(captured.num_rows(), layers, context_len, heads);
    let mut scores = Vec::new();
    for row in 0..captured.num_rows() {
        if !captured.is_valid(row) {
            continue;
        }
        let position = captured.row_position(row);
        if position + 1 < context_len {
            return Err(Error::Position(format!(
                "captured row at position {position} sees fewer than {context_len} context keys"
            )));
        }
        let slot = cache.slot_of_position(position).ok_or_else(|| {
            Error::Position(format!("captured position {position} not present in cache"))
        })?;
        let visible = slot + 1;
        for layer in 0..layers {
            for head in 0..heads {
                let kv_head = head / group;
                let q = captured.query(row, layer, head);
                scores.clear();
                scores.reserve(visible);
                let mut max = f64::NEG_INFINITY;
                for s in 0..visible {
                    let v = math::dot_f64(q, cache.key(layer, kv_head, s)) * scale;
                    if v > max {
                        max = v;
                    }
                    scores.push(v);
                }
                let mut denom = 0.0f64;
                for v in &mut scores {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                for token in 0..context_len {
                    out.set(row, layer, token, head, (scores[token] / denom) as f32);
                }
            }
        }
        out.set_valid(row, true);
    }
    if out.valid_count() == 0 {
        return Err(Error::EmptyAggregation);
    }
    Ok(out)
}
