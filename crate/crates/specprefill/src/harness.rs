//! Desk-scale task plumbing: needle-retrieval generators, retention metrics,
//! request/result file I/O, a trivial byte-level tokenizer, and two
//! hand-built models with engineered attention/emission behavior for
//! evaluation and tests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{LayerWeights, Model, ModelWeights};
use crate::speculation::{Phase, Request, RequestBatch, SpeculatedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Needle,
    Passkey,
    Copy,
}

/// A synthetic prompt with a planted needle span whose answer is derivable
/// from the span alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub prompt_tokens: Vec<u32>,
    /// `[start, end)` token indices of the needle.
    pub needle_span: (usize, usize),
    pub answer_tokens: Vec<u32>,
    pub kind: TaskKind,
}

/// Tokens in a planted needle.
pub const NEEDLE_LEN: usize = 8;

/// Deterministic needle task: filler tokens from the low half of the vocab,
/// a needle subsequence from the high half planted at the requested
/// fractional position.
pub fn gen_needle(
    seed: u64,
    total_len: usize,
    needle_pos_fraction: f64,
    vocab: u32,
) -> Result<SyntheticTask> {
    if vocab < 4 {
        return Err(Error::InvalidArgument("vocab must be at least 4".into()));
    }
    if !(0.0..=1.0).contains(&needle_pos_fraction) {
        return Err(Error::InvalidArgument(format!(
            "needle position fraction {needle_pos_fraction} outside [0, 1]"
        )));
    }
    if NEEDLE_LEN > total_len {
        return Err(Error::InvalidArgument(format!(
            "needle of {NEEDLE_LEN} tokens longer than prompt of {total_len}"
        )));
    }
    let filler_bound = vocab / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompt: Vec<u32> = (0..total_len).map(|_| rng.gen_range(0..filler_bound)).collect();
    let needle: Vec<u32> = (0..NEEDLE_LEN)
        .map(|_| rng.gen_range(filler_bound..vocab))
        .collect();
    let start = ((needle_pos_fraction * total_len as f64).floor() as usize)
        .min(total_len - NEEDLE_LEN);
    prompt[start..start + NEEDLE_LEN].copy_from_slice(&needle);
    Ok(SyntheticTask {
        prompt_tokens: prompt,
        needle_span: (start, start + NEEDLE_LEN),
        answer_tokens: needle,
        kind: TaskKind::Needle,
    })
}

/// Fraction of tasks whose needle tokens are *all* present in the kept
/// positions of the corresponding speculated prompt.
pub fn retention_rate(tasks: &[SyntheticTask], prompts: &[SpeculatedPrompt]) -> Result<f64> {
    if tasks.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tasks but {} speculated prompts",
            tasks.len(),
            prompts.len()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let mut retained = 0usize;
    for (task, prompt) in tasks.iter().zip(prompts) {
        let (start, end) = task.needle_span;
        let all_kept = (start..end).all(|i| prompt.kept_position_ids.binary_search(&i).is_ok());
        if all_kept {
            retained += 1;
        }
    }
    Ok(retained as f64 / tasks.len() as f64)
}

/// Byte-level text tokenization: one token per byte.
pub fn text_to_tokens(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`text_to_tokens`]; tokens above 255 render as `?`.
pub fn tokens_to_text(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| u8::try_from(t).unwrap_or(b'?'))
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdField {
    Text(String),
    Number(i64),
}

impl IdField {
    fn into_string(self) -> String {
        match self {
            IdField::Text(s) => s,
            IdField::Number(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawRequest {
    id: IdField,
    tokens: Option<Vec<u32>>,
    text: Option<String>,
    max_new_tokens: usize,
}

/// Read a JSONL request file: one `{id, tokens | text, max_new_tokens}`
/// object per line. Order-preserving; a malformed line fails with its
/// 1-based line number rather than silently dropping anything.
pub fn read_requests(path: impl AsRef<Path>) -> Result<RequestBatch> {
    let reader = BufReader::new(File::open(path)?);
    let mut requests = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRequest = serde_json::from_str(&line).map_err(|e| Error::BadRequestLine {
            line: line_no,
            detail: e.to_string(),
        })?;
        let tokens = match (raw.tokens, raw.text) {
            (Some(t), None) => t,
            (None, Some(text)) => text_to_tokens(&text),
            (Some(_), Some(_)) => {
                return Err(Error::BadRequestLine {
                    line: line_no,
                    detail: "request has both `tokens` and `text`".into(),
                })
            }
            (None, None) => {
                return Err(Error::BadRequestLine {
                    line: line_no,
                    detail: "request needs `tokens` or `text`".into(),
                })
            }
        };
        requests.push(Request {
            id: raw.id.into_string(),
            tokens,
            max_new_tokens: raw.max_new_tokens,
            phase: Phase::Prefill,
        });
    }
    Ok(RequestBatch { requests })
}

/// One generation result destined for the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub id: String,
    pub kept_tokens: usize,
    pub original_tokens: usize,
    pub output_tokens: usize,
    pub wall_ms: f64,
}

pub const RESULTS_HEADER: &str = "id,kept_tokens,original_tokens,output_tokens,wall_ms";

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write results as CSV with the fixed header column order.
pub fn write_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.3}",
            csv_field(&r.id),
            r.kept_tokens,
            r.original_tokens,
            r.output_tokens,
            r.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Engineered models
// ---------------------------------------------------------------------------

/// Vocab size of [`spotlight_model`]; tokens at or above `SPOTLIGHT_VOCAB / 2`
/// get amplified attention keys.
pub const SPOTLIGHT_VOCAB: u32 = 512;

/// One-layer model whose keys for high-vocab tokens dwarf everything else, so
/// the aggregated importance score peaks on whatever needle subsequence was
/// planted from that range. Matches the [`gen_needle`] vocab split.
///
/// Construction notes: query/key projections zero the first rotary pair
/// (whose frequency is always 1), the remaining pair frequencies are tiny
/// (`theta = 1e12`), and needle keys are scaled 50x, so needle attention
/// dominates at any position offset a desk-scale prompt can produce. Values
/// pass through untouched and the LM head ties the embedding, giving the
/// model a deterministic, attention-driven output to compare across full and
/// speculated prefills.
pub fn spotlight_model() -> Result<Model> {
    let d = 8usize;
    let config = ModelConfig {
        num_layers: 1,
        hidden_size: d,
        intermediate_size: d,
        num_query_heads: 1,
        num_kv_heads: 1,
        vocab_size: SPOTLIGHT_VOCAB as usize,
        head_dim: d,
        rope_theta: 1e12,
        max_position: 8192,
    };

    let mut embedding = vec![0.0f32; SPOTLIGHT_VOCAB as usize * d];
    for t in 0..SPOTLIGHT_VOCAB as usize {
        let row = &mut embedding[t * d..(t + 1) * d];
        if (t as u32) < SPOTLIGHT_VOCAB / 2 {
            row[1] = 1.0;
            row[2] = 0.7;
            row[3] = 1.3;
        } else {
            row[5] = 1.0;
        }
    }

    // Coordinates 0 and 4 form the fast-rotating pair; both projections leave
    // them at zero.
    let signal_rows = [1usize, 2, 3, 5, 6, 7];
    let mut wq = vec![0.0f32; d * d];
    let mut wk = vec![0.0f32; d * d];
    for &r in &signal_rows {
        for c in [1, 2, 3, 5] {
            wq[r * d + c] = 1.0;
        }
        wk[r * d + 5] = 50.0;
        for c in [1, 2, 3] {
            wk[r * d + c] = 0.02;
        }
    }
    let mut wv = vec![0.0f32; d * d];
    let mut wo = vec![0.0f32; d * d];
    for i in 0..d {
        wv[i * d + i] = 1.0;
        wo[i * d + i] = 0.5;
    }

    let layer = LayerWeights {
        attn_norm: vec![1.0; d],
        wq,
        wk,
        wv,
        wo,
        mlp_norm: vec![1.0; d],
        w_gate: vec![0.0; d * d],
        w_up: vec![0.0; d * d],
        w_down: vec![0.0; d * d],
    };
    let lm_head = embedding.clone();
    Model::from_weights(
        config,
        ModelWeights {
            embedding,
            layers: vec![layer],
            final_norm: vec![1.0; d],
            lm_head,
        },
    )
}

/// Model whose greedy emission after processing token `t` is `(t + 1) % vocab`:
/// attention and MLP are inert, the LM head is a shift of the one-hot
/// embedding. Used to plant EOS at an exact look-ahead step.
pub fn successor_model(vocab: usize) -> Result<Model> {
    if vocab % 2 != 0 || vocab < 4 {
        return Err(Error::InvalidArgument(
            "successor model needs an even vocab >= 4".into(),
        ));
    }
    let d = vocab;
    let config = ModelConfig {
        num_layers: 1,
        hidden_size: d,
        intermediate_size: 4,
        num_query_heads: 1,
        num_kv_heads: 1,
        vocab_size: vocab,
        head_dim: d,
        rope_theta: 10_000.0,
        max_position: 4096,
    };
    let mut embedding = vec![0.0f32; vocab * d];
    for t in 0..vocab {
        embedding[t * d + t] = 1.0;
    }
    let mut lm_head = vec![0.0f32; vocab * d];
    for v in 0..vocab {
        lm_head[v * d + (v + vocab - 1) % vocab] = 1.0;
    }
    let layer = LayerWeights {
        attn_norm: vec![1.0; d],
        wq: vec![0.0; d * d],
        wk: vec![0.0; d * d],
        wv: vec![0.0; d * d],
        wo: vec![0.0; d * d],
        mlp_norm: vec![1.0; d],
        w_gate: vec![0.0; 4 * d],
        w_up: vec![0.0; 4 * d],
        w_down: vec![0.0; d * 4],
    };
    Model::from_weights(
        config,
        ModelWeights {
            embedding,
            layers: vec![layer],
            final_norm: vec![1.0; d],
            lm_head,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speculation::{speculate_prompt, SpecConfig};

    #[test]
    fn needle_at_fraction_zero_starts_at_index_zero() {
        let t = gen_needle(1, 64, 0.0, 512).unwrap();
        assert_eq!(t.needle_span, (0, NEEDLE_LEN));
        assert!(t.prompt_tokens[..NEEDLE_LEN].iter().all(|&x| x >= 256));
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(
            gen_needle(7, 128, 0.4, 512).unwrap(),
            gen_needle(7, 128, 0.4, 512).unwrap()
        );
        assert_ne!(
            gen_needle(7, 128, 0.4, 512).unwrap(),
            gen_needle(8, 128, 0.4, 512).unwrap()
        );
    }

    #[test]
    fn midpoint_needle_lands_in_the_chunk_holding_index_320() {
        let t = gen_needle(3, 640, 0.5, 512).unwrap();
        assert_eq!(t.needle_span.0, 320);
        let chunk = t.needle_span.0 / 32;
        assert_eq!(chunk, 320 / 32);
    }

    #[test]
    fn needle_longer_than_prompt_rejected() {
        assert!(gen_needle(0, NEEDLE_LEN - 1, 0.0, 512).is_err());
    }

    #[test]
    fn needle_at_fraction_one_is_clamped_inside() {
        let t = gen_needle(5, 64, 1.0, 512).unwrap();
        assert_eq!(t.needle_span, (64 - NEEDLE_LEN, 64));
    }

    #[test]
    fn retention_trivial_cases() {
        let task = gen_needle(1, 64, 0.5, 512).unwrap();
        let keep_all = SpeculatedPrompt {
            kept_token_ids: task.prompt_tokens.clone(),
            kept_position_ids: (0..64).collect(),
            original_context_len: 64,
            first_decode_position: 64,
        };
        let drop_needle = SpeculatedPrompt {
            kept_token_ids: task.prompt_tokens[..32].to_vec(),
            kept_position_ids: (0..32).collect(),
            original_context_len: 64,
            first_decode_position: 64,
        };
        let tasks = vec![task.clone(), task];
        let prompts = vec![keep_all, drop_needle];
        let r = retention_rate(&tasks, &prompts).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spotlight_speculator_always_retains_the_needle() {
        let model = spotlight_model().unwrap();
        let cfg = SpecConfig {
            keep_rate: 0.1,
            eos_token_id: SPOTLIGHT_VOCAB - 1,
            ..SpecConfig::default()
        };
        let mut tasks = Vec::new();
        let mut prompts = Vec::new();
        for seed in 0..20 {
            let fraction = (seed as f64 * 0.05) % 1.0;
            let task = gen_needle(seed, 640, fraction, SPOTLIGHT_VOCAB).unwrap();
            prompts.push(speculate_prompt(&model, &task.prompt_tokens, &cfg).unwrap());
            tasks.push(task);
        }
        assert_eq!(retention_rate(&tasks, &prompts).unwrap(), 1.0);
    }

    #[test]
    fn successor_model_emits_increments() {
        let m = successor_model(32).unwrap();
        let out = crate::speculation::generate_baseline(&m, &[4], 31, 5).unwrap();
        assert_eq!(out, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn jsonl_round_trip_preserves_ids_and_order() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("specprefill-req-{}.jsonl", std::process::id()));
        std::fs::write(
            &path,
            concat!(
                "{\"id\": \"a\", \"tokens\": [1, 2, 3], \"max_new_tokens\": 4}\n",
                "{\"id\": 17, \"text\": \"hi\", \"max_new_tokens\": 2}\n",
                "{\"id\": \"c\", \"tokens\": [9], \"max_new_tokens\": 1}\n",
            ),
        )
        .unwrap();
        let batch = read_requests(&path).unwrap();
        assert_eq!(batch.requests.len(), 3);
        assert_eq!(batch.requests[0].id, "a");
        assert_eq!(batch.requests[1].id, "17");
        assert_eq!(batch.requests[1].tokens, vec![104, 105]);
        assert_eq!(batch.requests[2].id, "c");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn empty_file_gives_empty_batch() {
        let path = std::env::temp_dir().join(format!("specprefill-empty-{}.jsonl", std::process::id()));
        std::fs::write(&path, "").unwrap();
        assert!(read_requests(&path).unwrap().requests.is_empty());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_second_line_reports_line_two() {
        let path = std::env::temp_dir().join(format!("specprefill-bad-{}.jsonl", std::process::id()));
        std::fs::write(
            &path,
            concat!(
                "{\"id\": \"a\", \"tokens\": [1], \"max_new_tokens\": 1}\n",
                "{\"id\": \"b\", \"max_new_tokens\": }\n",
            ),
        )
        .unwrap();
        match read_requests(&path) {
            Err(Error::BadRequestLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected BadRequestLine, got {other:?}"),
        }
        let msg = read_requests(&path).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn results_csv_has_the_exact_header() {
        let path = std::env::temp_dir().join(format!("specprefill-res-{}.csv", std::process::id()));
        write_results(
            &path,
            &[ResultRow {
                id: "a,b".into(),
                kept_tokens: 3,
                original_tokens: 10,
                output_tokens: 2,
                wall_ms: 1.5,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,kept_tokens,original_tokens,output_tokens,wall_ms"));
        assert_eq!(lines.next(), Some("\"a,b\",3,10,2,1.500"));
        std::fs::remove_file(&path).ok();
    }
}
