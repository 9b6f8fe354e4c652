//! Architecture hyperparameters shared by the inference core and the FLOPS model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder-only transformer shape: layers, widths, head counts, vocab.
///
/// The same struct parameterizes both the toy inference core and the
/// analytical FLOPS estimates, so the named presets below describe models far
/// larger than anything this crate will ever run forward passes on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub vocab_size: usize,
    pub head_dim: usize,
    pub rope_theta: f64,
    pub max_position: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("num_query_heads", self.num_query_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("vocab_size", self.vocab_size),
            ("head_dim", self.head_dim),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be a positive real".into()));
        }
        if self.hidden_size % self.num_query_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_query_heads {}",
                self.hidden_size, self.num_query_heads
            )));
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(Error::Config(format!(
                "num_query_heads {} not divisible by num_kv_heads {}",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if self.head_dim * self.num_query_heads != self.hidden_size {
            return Err(Error::Config(format!(
                "head_dim {} * num_query_heads {} != hidden_size {}",
                self.head_dim, self.num_query_heads, self.hidden_size
            )));
        }
        Ok(())
    }

    /// Convenience constructor that derives `head_dim = hidden / heads`.
    pub fn new(
        num_layers: usize,
        hidden_size: usize,
        intermediate_size: usize,
        num_query_heads: usize,
        num_kv_heads: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if num_query_heads == 0 || hidden_size % num_query_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {hidden_size} not divisible by num_query_heads {num_query_heads}"
            )));
        }
        let cfg = ModelConfig {
            num_layers,
            hidden_size,
            intermediate_size,
            num_query_heads,
            num_kv_heads,
            vocab_size,
            head_dim: hidden_size / num_query_heads,
            rope_theta: 10_000.0,
            max_position: 8192,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of one token's keys (or values) across all KV heads.
    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// Query heads served by each KV head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    /// Official Llama 3.1 architecture constants, referenced by preset name.
    pub fn preset(name: &str) -> Result<Self> {
        let (l, d, i, h, hp) = match name {
            "llama8b" => (32, 4096, 14336, 32, 8),
            "llama70b" => (80, 8192, 28672, 64, 8),
            "llama405b" => (126, 16384, 53248, 128, 8),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected llama8b, llama70b, llama405b)"
                )))
            }
        };
        Ok(ModelConfig {
            num_layers: l,
            hidden_size: d,
            intermediate_size: i,
            num_query_heads: h,
            num_kv_heads: hp,
            vocab_size: 128_256,
            head_dim: d / h,
            rope_theta: 500_000.0,
            max_position: 131_072,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_is_valid() {
        let cfg = ModelConfig::new(2, 32, 64, 4, 2, 256).unwrap();
        assert_eq!(cfg.head_dim, 8);
        assert_eq!(cfg.kv_dim(), 16);
        assert_eq!(cfg.group_size(), 2);
    }

    #[test]
    fn non_divisible_hidden_rejected() {
        assert!(matches!(
            ModelConfig::new(2, 30, 64, 4, 2, 256),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn heads_not_divisible_by_kv_heads_rejected() {
        assert!(matches!(
            ModelConfig::new(2, 32, 64, 4, 3, 256),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn presets_resolve() {
        for (name, layers) in [("llama8b", 32), ("llama70b", 80), ("llama405b", 126)] {
            let cfg = ModelConfig::preset(name).unwrap();
            assert_eq!(cfg.num_layers, layers);
            cfg.validate().unwrap();
        }
        assert!(ModelConfig::preset("llama13b").is_err());
    }
}
