//! Token-importance speculation: look-ahead decoding of the speculator,
//! max-mean aggregation of its attention scores, pooling + contiguous-chunk
//! Top-K selection, original-position restoration, and the batched
//! prefill/decode orchestration that rewrites prompt requests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{attention_scores, AttentionTensor, CapturedQueries, KVCache, Model};

/// Knobs of the speculation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecConfig {
    /// Fraction of context chunks to keep, in (0, 1].
    pub keep_rate: f64,
    /// Contiguous block size for chunked selection.
    pub chunk_size: usize,
    /// Centered 1D average-pooling window (odd).
    pub pool_window: usize,
    /// Number of extra greedy speculator decode steps (N).
    pub look_ahead_steps: usize,
    pub eos_token_id: u32,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            keep_rate: 1.0,
            chunk_size: 32,
            pool_window: 5,
            look_ahead_steps: 0,
            eos_token_id: 0,
        }
    }
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_rate.is_finite() && self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::Config(format!(
                "keep_rate {} outside (0, 1]",
                self.keep_rate
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        if self.pool_window == 0 || self.pool_window % 2 == 0 {
            return Err(Error::Config(format!(
                "pool_window {} must be odd and positive",
                self.pool_window
            )));
        }
        Ok(())
    }

    /// Load from a JSON or TOML file (by extension; anything but `.toml`
    /// parses as JSON).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: SpecConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One non-negative importance value per context token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    scores: Vec<f64>,
}

impl ImportanceScores {
    pub fn from_values(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument(
                "importance scores must be finite and non-negative".into(),
            ));
        }
        Ok(ImportanceScores { scores })
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// A prompt rewritten to its kept tokens with original position ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculatedPrompt {
    pub kept_token_ids: Vec<u32>,
    pub kept_position_ids: Vec<usize>,
    pub original_context_len: usize,
    /// Always equals `original_context_len`: decoding resumes at the full
    /// context length even when trailing tokens were dropped.
    pub first_decode_position: usize,
}

/// Request phase tag for batched orchestration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub tokens: Vec<u32>,
    pub max_new_tokens: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RequestBatch {
    pub requests: Vec<Request>,
}

/// Result of running speculation over one request of a batch.
#[derive(Debug)]
pub enum SpeculationOutcome {
    /// Decode-phase request, untouched.
    PassThrough,
    Speculated(SpeculatedPrompt),
    /// This request failed; the rest of the batch is unaffected.
    Failed(Error),
}

#[derive(Debug)]
pub struct SpeculatedEntry {
    pub request: Request,
    pub outcome: SpeculationOutcome,
}

#[derive(Debug)]
pub struct SpeculatedBatch {
    pub entries: Vec<SpeculatedEntry>,
}

/// Prefill the speculator capturing the last prompt token's queries (row 0),
/// then decode greedily for up to `look_ahead_steps` steps, capturing each
/// decoded token's queries. The row of the first emitted EOS and every later
/// row are invalid; decoding stops there. Always returns N+1 rows plus the
/// KV cache the scores are computed against.
pub fn look_ahead(
    speculator: &Model,
    prompt_tokens: &[u32],
    spec: &SpecConfig,
) -> Result<(CapturedQueries, KVCache)> {
    spec.validate()?;
    if prompt_tokens.is_empty() {
        return Err(Error::InvalidArgument("prompt must be non-empty".into()));
    }
    let m = prompt_tokens.len();
    let n = spec.look_ahead_steps;
    let mut cache = speculator.new_cache(m + n);
    let positions: Vec<usize> = (0..m).collect();
    let mut captured = CapturedQueries::new(speculator.config());

    let (mut logits, row) = speculator.prefill(prompt_tokens, &positions, &mut cache, true)?;
    captured.push(row.expect("capture_last was set"), true);

    let mut next = math::argmax(&logits) as u32;
    let mut step = 1;
    while step <= n {
        if next == spec.eos_token_id {
            break;
        }
        let (l, row) = speculator.decode_step(next, m + step - 1, &mut cache, true)?;
        captured.push(row.expect("capture was set"), true);
        logits = l;
        next = math::argmax(&logits) as u32;
        step += 1;
    }
    for j in step..=n {
        captured.push_invalid_placeholder(m + j - 1);
    }
    Ok((captured, cache))
}

/// Max-mean aggregation: per token, the maximum over layers and heads, then
/// the mean over valid rows.
pub fn compute_token_importance(attn: &AttentionTensor) -> Result<ImportanceScores> {
    let valid = attn.valid_count();
    if valid == 0 {
        return Err(Error::EmptyAggregation);
    }
    let m = attn.context_len();
    let mut scores = vec![0.0f64; m];
    for token in 0..m {
        let mut acc = 0.0f64;
        for row in 0..attn.num_rows() {
            if !attn.is_valid(row) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for layer in 0..attn.num_layers() {
                for head in 0..attn.num_heads() {
                    let v = attn.get(row, layer, token, head) as f64;
                    if v > best {
                        best = v;
                    }
                }
            }
            acc += best;
        }
        scores[token] = acc / valid as f64;
    }
    ImportanceScores::from_values(scores)
}

/// Centered moving average with shrinking windows at the edges; `window = 1`
/// is the identity.
pub fn smooth_scores(scores: &ImportanceScores, window: usize) -> Result<ImportanceScores> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "pooling window {window} must be odd and positive"
        )));
    }
    if window == 1 {
        return Ok(scores.clone());
    }
    let v = scores.values();
    let half = window / 2;
    let mut out = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(v.len());
        let sum: f64 = v[lo..hi].iter().sum();
        out.push(sum / (hi - lo) as f64);
    }
    ImportanceScores::from_values(out)
}

/// Number of chunks kept for a given rate: `max(1, ceil(rate * num_chunks))`,
/// with products within 1e-9 of an integer treated as that integer.
pub fn selected_chunk_count(keep_rate: f64, num_chunks: usize) -> usize {
    let raw = keep_rate * num_chunks as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    } as usize;
    k.max(1).min(num_chunks)
}

/// Mean score of each contiguous chunk; the last (possibly partial) chunk is
/// averaged over its actual members.
pub fn chunk_means(scores: &ImportanceScores, chunk_size: usize) -> Vec<f64> {
    let v = scores.values();
    let num_chunks = v.len().div_ceil(chunk_size);
    (0..num_chunks)
        .map(|c| {
            let lo = c * chunk_size;
            let hi = ((c + 1) * chunk_size).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Indices of the Top-K chunks by mean score, ties broken toward the lower
/// chunk index. Returned sorted ascending.
pub fn select_chunk_set(scores: &ImportanceScores, spec: &SpecConfig) -> Result<Vec<usize>> {
    spec.validate()?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("scores must be non-empty".into()));
    }
    let means = chunk_means(scores, spec.chunk_size);
    let k = selected_chunk_count(spec.keep_rate, means.len());
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| {
        means[b]
            .partial_cmp(&means[a])
            .expect("importance scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Token indices covered by the Top-K chunks, sorted ascending.
pub fn select_chunks(scores: &ImportanceScores, spec: &SpecConfig) -> Result<Vec<usize>> {
    let chunks = select_chunk_set(scores, spec)?;
    let m = scores.len();
    let mut kept = Vec::new();
    for c in chunks {
        let lo = c * spec.chunk_size;
        let hi = ((c + 1) * spec.chunk_size).min(m);
        kept.extend(lo..hi);
    }
    Ok(kept)
}

/// Position fields of a [`SpeculatedPrompt`].
#[derive(Debug, Clone, PartialEq)]
pub struct RestoredPositions {
    pub kept_position_ids: Vec<usize>,
    pub first_decode_position: usize,
}

/// Kept tokens keep their original position ids verbatim; the first decode
/// position is the full original context length.
pub fn restore_position_ids(kept_indices: &[usize], context_len: usize) -> Result<RestoredPositions> {
    let mut prev: Option<usize> = None;
    for &i in kept_indices {
        if i >= context_len {
            return Err(Error::Position(format!(
                "kept index {i} out of range for context length {context_len}"
            )));
        }
        if let Some(p) = prev {
            if i <= p {
                return Err(Error::Position(format!(
                    "kept indices must strictly increase ({i} after {p})"
                )));
            }
        }
        prev = Some(i);
    }
    Ok(RestoredPositions {
        kept_position_ids: kept_indices.to_vec(),
        first_decode_position: context_len,
    })
}

/// The full per-prompt pipeline: look-ahead, attention scores, max-mean
/// aggregation, pooling, chunk Top-K, position restoration.
pub fn speculate_prompt(
    speculator: &Model,
    prompt_tokens: &[u32],
    spec: &SpecConfig,
) -> Result<SpeculatedPrompt> {
    let m = prompt_tokens.len();
    let (captured, cache) = look_ahead(speculator, prompt_tokens, spec)?;
    let attn = attention_scores(&captured, &cache, m)?;
    let importance = compute_token_importance(&attn)?;
    let smoothed = smooth_scores(&importance, spec.pool_window)?;
    let kept = select_chunks(&smoothed, spec)?;
    let restored = restore_position_ids(&kept, m)?;
    debug_assert_eq!(restored.kept_position_ids, kept);
    debug_assert_eq!(restored.first_decode_position, m);
    Ok(SpeculatedPrompt {
        kept_token_ids: kept.iter().map(|&i| prompt_tokens[i]).collect(),
        kept_position_ids: restored.kept_position_ids,
        original_context_len: m,
        first_decode_position: restored.first_decode_position,
    })
}

/// Batched orchestration: decode-phase requests pass through untouched,
/// prefill-phase requests are rewritten to speculated prompts. Input order is
/// preserved and one request's failure does not corrupt the others.
pub fn speculate_prefill(
    batch: &RequestBatch,
    speculator: &Model,
    spec: &SpecConfig,
) -> Result<SpeculatedBatch> {
    if batch.requests.is_empty() {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    let entries = batch
        .requests
        .iter()
        .map(|request| {
            let outcome = match request.phase {
                Phase::Decode => SpeculationOutcome::PassThrough,
                Phase::Prefill => match speculate_prompt(speculator, &request.tokens, spec) {
                    Ok(p) => SpeculationOutcome::Speculated(p),
                    Err(e) => SpeculationOutcome::Failed(e),
                },
            };
            SpeculatedEntry {
                request: request.clone(),
                outcome,
            }
        })
        .collect();
    Ok(SpeculatedBatch { entries })
}

fn greedy_decode(
    model: &Model,
    mut logits: Vec<f32>,
    mut position: usize,
    cache: &mut KVCache,
    eos_token_id: u32,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let next = math::argmax(&logits) as u32;
        if next == eos_token_id {
            break;
        }
        out.push(next);
        if out.len() == max_new_tokens {
            break;
        }
        let (l, _) = model.decode_step(next, position, cache, false)?;
        logits = l;
        position += 1;
    }
    Ok(out)
}

/// Plain greedy generation over the full prompt at contiguous positions.
pub fn generate_baseline(
    model: &Model,
    prompt_tokens: &[u32],
    eos_token_id: u32,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    if prompt_tokens.is_empty() {
        return Err(Error::InvalidArgument("prompt must be non-empty".into()));
    }
    let m = prompt_tokens.len();
    let positions: Vec<usize> = (0..m).collect();
    let mut cache = model.new_cache(m + max_new_tokens + 1);
    let (logits, _) = model.prefill(prompt_tokens, &positions, &mut cache, false)?;
    greedy_decode(model, logits, m, &mut cache, eos_token_id, max_new_tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecGeneration {
    pub speculated: SpeculatedPrompt,
    pub tokens: Vec<u32>,
}

/// End-to-end speculative generation: speculate the prompt, prefill the base
/// model on the kept tokens at their original positions, then decode greedily
/// from the full original context length.
pub fn generate_with_spec(
    base: &Model,
    speculator: &Model,
    prompt_tokens: &[u32],
    spec: &SpecConfig,
    max_new_tokens: usize,
) -> Result<SpecGeneration> {
    let speculated = speculate_prompt(speculator, prompt_tokens, spec)?;
    let mut cache = base.new_cache(speculated.kept_token_ids.len() + max_new_tokens + 1);
    let (logits, _) = base.prefill(
        &speculated.kept_token_ids,
        &speculated.kept_position_ids,
        &mut cache,
        false,
    )?;
    let tokens = greedy_decode(
        base,
        logits,
        speculated.first_decode_position,
        &mut cache,
        spec.eos_token_id,
        max_new_tokens,
    )?;
    Ok(SpecGeneration { speculated, tokens })
}
