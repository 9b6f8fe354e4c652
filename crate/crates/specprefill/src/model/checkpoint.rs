//! Checkpoint file format.
//!
//! Layout: 8-byte magic `SPFCKPT1`, 4-byte little-endian header length, a
//! UTF-8 JSON header (config + ordered tensor manifest with name/shape/dtype
//! and byte offset relative to the start of the payload section), then the
//! raw little-endian row-major f32 tensor payloads. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{expected_shapes, Model, ModelWeights};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPFCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Write `model` to `path` in the checkpoint format.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let config = model.config();
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, shape) in expected_shapes(config) {
        let n: u64 = shape.iter().map(|&s| s as u64).product();
        entries.push(TensorEntry {
            name,
            shape,
            dtype: "f32".to_string(),
            offset,
        });
        offset += n * 4;
    }
    let header = Header {
        config: config.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (name, _) in expected_shapes(config) {
        let data = model.weights().tensor(&name).expect("manifest tensor exists");
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a model from `path`, validating magic, header, shapes, and payload
/// length. `load(save(m))` reproduces `m` bitwise.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CheckpointFormat("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::CheckpointFormat("file shorter than header length field".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::CheckpointFormat("file shorter than declared header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("header decode: {e}")))?;
    header.config.validate()?;

    // Header manifest must agree with the shapes the config dictates.
    let expected = expected_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "manifest lists {} tensors, config dictates {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::CheckpointFormat(format!(
                "manifest order: found `{}`, expected `{}`",
                entry.name, name
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::CheckpointFormat(format!(
                "tensor `{}` dtype `{}` unsupported",
                entry.name, entry.dtype
            )));
        }
        if &entry.shape != shape {
            return Err(Error::ShapeMismatch {
                tensor: entry.name.clone(),
                detail: format!("header shape {:?}, config dictates {:?}", entry.shape, shape),
            });
        }
        if entry.offset != offset {
            return Err(Error::CheckpointFormat(format!(
                "tensor `{}` offset {} but payload cursor is {}",
                entry.name, entry.offset, offset
            )));
        }
        offset += shape.iter().map(|&s| s as u64).product::<u64>() * 4;
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if (payload.len() as u64) < offset {
        return Err(Error::TruncatedPayload {
            needed: offset,
            available: payload.len() as u64,
        });
    }
    if payload.len() as u64 > offset {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after declared payload",
            payload.len() as u64 - offset
        )));
    }

    let read_tensor = |entry: &TensorEntry| -> Vec<f32> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        (0..n)
            .map(|i| {
                let b = &payload[start + i * 4..start + i * 4 + 4];
                f32::from_le_bytes([b[0], b[1], b[2], b[3]])
            })
            .collect()
    };

    let cfg = header.config.clone();
    let mut it = header.tensors.iter();
    let embedding = read_tensor(it.next().unwrap());
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        let attn_norm = read_tensor(it.next().unwrap());
        let wq = read_tensor(it.next().unwrap());
        let wk = read_tensor(it.next().unwrap());
        let wv = read_tensor(it.next().unwrap());
        let wo = read_tensor(it.next().unwrap());
        let mlp_norm = read_tensor(it.next().unwrap());
        let w_gate = read_tensor(it.next().unwrap());
        let w_up = read_tensor(it.next().unwrap());
        let w_down = read_tensor(it.next().unwrap());
        layers.push(super::LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_gate,
            w_up,
            w_down,
        });
    }
    let final_norm = read_tensor(it.next().unwrap());
    let lm_head = read_tensor(it.next().unwrap());

    Model::from_weights(
        cfg,
        ModelWeights {
            embedding,
            layers,
            final_norm,
            lm_head,
        },
    )
}
