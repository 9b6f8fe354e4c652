//! Closed-form FLOPS, overhead, and speedup model.
//!
//! FLOPS are multiply-accumulate counts of the four dominant components —
//! MLP, QKVO projections, self-attention, LM head — evaluated in exact
//! integer arithmetic. Lower-order work (norms, rotary rotations, vector
//! adds) is ignored. Ratios and the overhead/speedup maps are f64.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Per-component MAC counts for one forward over a `[B, S]` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsProfile {
    pub mlp: u128,
    pub qkvo: u128,
    pub self_attention: u128,
    pub lm_head: u128,
}

impl FlopsProfile {
    /// Exact by construction: the component sum.
    pub fn total(&self) -> u128 {
        self.mlp + self.qkvo + self.self_attention + self.lm_head
    }

    pub fn total_f64(&self) -> f64 {
        self.total() as f64
    }
}

/// Component FLOPS for batch `B`, sequence length `S`:
/// MLP `3BSDI`, QKVO `BSD^2(2 + 2H'/H)`, attention `2BS^2D`, LM head `BSDV`,
/// each of the first three multiplied by the layer count.
pub fn flops_profile(config: &ModelConfig, batch: u64, seq_len: u64) -> Result<FlopsProfile> {
    config.validate()?;
    if batch == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument(
            "batch and sequence length must be >= 1".into(),
        ));
    }
    let l = config.num_layers as u128;
    let d = config.hidden_size as u128;
    let i = config.intermediate_size as u128;
    let v = config.vocab_size as u128;
    let b = batch as u128;
    let s = seq_len as u128;
    // D^2 * H'/H is an integer: D = H * head_dim, so D^2 * H'/H = D * head_dim * H'.
    let d2_kv = d * config.head_dim as u128 * config.num_kv_heads as u128;

    Ok(FlopsProfile {
        mlp: l * 3 * b * s * d * i,
        qkvo: l * b * s * (2 * d * d + 2 * d2_kv),
        self_attention: l * 2 * b * s * s * d,
        lm_head: b * s * d * v,
    })
}

/// The Table-style closed form `LBSD(3I + D(2 + 2H'/H) + 2S) + BSDV`,
/// evaluated independently of the component breakdown.
pub fn flops_closed_form(config: &ModelConfig, batch: u64, seq_len: u64) -> Result<u128> {
    config.validate()?;
    if batch == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument(
            "batch and sequence length must be >= 1".into(),
        ));
    }
    let l = config.num_layers as u128;
    let d = config.hidden_size as u128;
    let i = config.intermediate_size as u128;
    let v = config.vocab_size as u128;
    let b = batch as u128;
    let s = seq_len as u128;
    let d_kv = config.head_dim as u128 * config.num_kv_heads as u128;
    Ok(l * b * s * d * (3 * i + 2 * d + 2 * d_kv + 2 * s) + b * s * d * v)
}

/// `FLOPS(spec) / FLOPS(base)` at the same batch and sequence length.
pub fn relative_flops(
    spec_config: &ModelConfig,
    base_config: &ModelConfig,
    batch: u64,
    seq_len: u64,
) -> Result<f64> {
    let spec = flops_profile(spec_config, batch, seq_len)?;
    let base = flops_profile(base_config, batch, seq_len)?;
    Ok(spec.total_f64() / base.total_f64())
}

fn validate_ratio_inputs(flops_ratio: f64, keep_rate: f64) -> Result<()> {
    if !(flops_ratio.is_finite() && flops_ratio > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "flops ratio {flops_ratio} must be a positive real"
        )));
    }
    if !(keep_rate.is_finite() && keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep rate {keep_rate} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Speculation overhead: the speculator's share of total pipeline FLOPS,
/// `r / (r + alpha)` for `r = FLOPS(spec)/FLOPS(base)` and keep rate `alpha`.
pub fn overhead(flops_ratio: f64, keep_rate: f64) -> Result<f64> {
    validate_ratio_inputs(flops_ratio, keep_rate)?;
    Ok(flops_ratio / (flops_ratio + keep_rate))
}

/// Theoretical TTFT speedup upper bound under the linear-in-tokens cost
/// model: `1 / (r + alpha)`.
pub fn speedup_upper_bound(flops_ratio: f64, keep_rate: f64) -> Result<f64> {
    validate_ratio_inputs(flops_ratio, keep_rate)?;
    Ok(1.0 / (flops_ratio + keep_rate))
}

/// Quadratic-attention-aware speedup variant for sensitivity analysis: the
/// base model's kept-prefill cost is re-evaluated at the kept token count
/// (`ceil(alpha * S)`) instead of scaling linearly, so the attention term
/// shrinks quadratically.
pub fn speedup_quadratic(
    spec_config: &ModelConfig,
    base_config: &ModelConfig,
    batch: u64,
    seq_len: u64,
    keep_rate: f64,
) -> Result<f64> {
    if !(keep_rate.is_finite() && keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep rate {keep_rate} outside (0, 1]"
        )));
    }
    let kept = ((keep_rate * seq_len as f64).ceil() as u64).clamp(1, seq_len);
    let base_full = flops_profile(base_config, batch, seq_len)?.total_f64();
    let spec_full = flops_profile(spec_config, batch, seq_len)?.total_f64();
    let base_kept = flops_profile(base_config, batch, kept)?.total_f64();
    Ok(base_full / (spec_full + base_kept))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen with independent big-integer arithmetic from the preset
    // configs at B=1, S=32768.
    const TOTAL_8B: u128 = 527_387_624_210_432;
    const TOTAL_70B: u128 = 3_684_807_062_061_056;
    const TOTAL_405B: u128 = 17_663_241_983_361_024;

    #[test]
    fn preset_totals_match_frozen_constants() {
        for (name, expect) in [
            ("llama8b", TOTAL_8B),
            ("llama70b", TOTAL_70B),
            ("llama405b", TOTAL_405B),
        ] {
            let cfg = ModelConfig::preset(name).unwrap();
            let p = flops_profile(&cfg, 1, 32768).unwrap();
            assert_eq!(p.total(), expect, "{name}");
            assert_eq!(p.total(), flops_closed_form(&cfg, 1, 32768).unwrap());
        }
    }

    #[test]
    fn mlp_component_is_three_bsdi_per_layer() {
        let cfg = ModelConfig::preset("llama8b").unwrap();
        let p = flops_profile(&cfg, 1, 32768).unwrap();
        let expect = 3u128 * 32768 * 4096 * 14336 * 32;
        assert_eq!(p.mlp, expect);
    }

    #[test]
    fn unit_parameter_evaluation_is_ten() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 1,
            intermediate_size: 1,
            num_query_heads: 1,
            num_kv_heads: 1,
            vocab_size: 1,
            head_dim: 1,
            rope_theta: 1.0,
            max_position: 1,
        };
        let p = flops_profile(&cfg, 1, 1).unwrap();
        assert_eq!(p.mlp, 3);
        assert_eq!(p.qkvo, 4);
        assert_eq!(p.self_attention, 2);
        assert_eq!(p.lm_head, 1);
        assert_eq!(p.total(), 10);
    }

    #[test]
    fn doubling_batch_doubles_every_component() {
        let cfg = ModelConfig::new(3, 64, 160, 8, 4, 1000).unwrap();
        let a = flops_profile(&cfg, 2, 777).unwrap();
        let b = flops_profile(&cfg, 4, 777).unwrap();
        assert_eq!(b.mlp, 2 * a.mlp);
        assert_eq!(b.qkvo, 2 * a.qkvo);
        assert_eq!(b.self_attention, 2 * a.self_attention);
        assert_eq!(b.lm_head, 2 * a.lm_head);
    }

    #[test]
    fn table_ratios_reproduce_within_tolerance() {
        let spec = ModelConfig::preset("llama8b").unwrap();
        let b70 = ModelConfig::preset("llama70b").unwrap();
        let b405 = ModelConfig::preset("llama405b").unwrap();
        let r70 = relative_flops(&spec, &b70, 1, 32768).unwrap();
        let r405 = relative_flops(&spec, &b405, 1, 32768).unwrap();
        assert!((r70 - 0.1424).abs() <= 0.005, "r70 = {r70}");
        assert!((r405 - 0.0296).abs() <= 0.001, "r405 = {r405}");
        assert_eq!(relative_flops(&spec, &spec, 1, 32768).unwrap(), 1.0);
    }

    #[test]
    fn overhead_arithmetic() {
        let o = overhead(0.0296, 0.1).unwrap();
        assert!((o - 0.228).abs() < 5e-4, "{o}");
        assert!(overhead(1e-9, 1.0).unwrap() < 1e-8);
        let half = overhead(0.37, 0.37).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        assert!(overhead(0.1, 0.0).is_err());
        assert!(overhead(0.1, 1.5).is_err());
        assert!(overhead(0.0, 0.5).is_err());
    }

    #[test]
    fn speedup_reproduces_the_analyzed_value() {
        let spec = ModelConfig::preset("llama8b").unwrap();
        let base = ModelConfig::preset("llama405b").unwrap();
        let r = relative_flops(&spec, &base, 1, 32768).unwrap();
        let s = speedup_upper_bound(r, 0.1).unwrap();
        assert!((s - 7.72).abs() <= 0.05, "speedup {s}");
    }

    #[test]
    fn speedup_limits_and_70b_point() {
        assert!((speedup_upper_bound(1e-12, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let s70 = speedup_upper_bound(0.1424, 0.1).unwrap();
        assert!((s70 - 1.0 / 0.2424).abs() < 1e-12);
        assert!((s70 - 4.13).abs() < 0.01);
    }

    #[test]
    fn complement_and_reciprocal_identities() {
        // overhead + alpha/(r+alpha) = 1 and speedup * (r+alpha) = 1. Each
        // side carries one independent f64 rounding, so "exact" here means
        // within 2 ulp of 1.
        for (r, a) in [(0.03, 0.1), (0.5, 0.5), (0.9, 1.0), (1e-6, 0.25), (0.37, 0.37)] {
            let o = overhead(r, a).unwrap();
            let s = speedup_upper_bound(r, a).unwrap();
            assert!((o + a / (r + a) - 1.0).abs() <= 2.0 * f64::EPSILON);
            assert!((s * (r + a) - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn speedup_strictly_decreasing_in_rate_and_ratio() {
        let mut prev = f64::INFINITY;
        for a in [0.05, 0.1, 0.2, 0.5, 1.0] {
            let s = speedup_upper_bound(0.03, a).unwrap();
            assert!(s < prev);
            prev = s;
        }
        let mut prev = f64::INFINITY;
        for r in [0.01, 0.03, 0.1, 0.5] {
            let s = speedup_upper_bound(r, 0.1).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn component_sum_equals_closed_form_for_random_configs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let head_dim = 2usize << rng.gen_range(0..5);
            let kv_heads = 1 << rng.gen_range(0..3);
            let group = 1 << rng.gen_range(0..3);
            let heads = kv_heads * group;
            let d = heads * head_dim;
            let cfg = ModelConfig {
                num_layers: rng.gen_range(1..=96),
                hidden_size: d,
                intermediate_size: rng.gen_range(1..=65536),
                num_query_heads: heads,
                num_kv_heads: kv_heads,
                vocab_size: rng.gen_range(1..=200_000),
                head_dim,
                rope_theta: 10_000.0,
                max_position: 1,
            };
            let b = rng.gen_range(1..=64);
            let s = rng.gen_range(1..=131_072);
            let p = flops_profile(&cfg, b, s).unwrap();
            assert_eq!(p.total(), flops_closed_form(&cfg, b, s).unwrap());
        }
    }

    #[test]
    fn quadratic_variant_beats_linear_bound() {
        // Re-pricing the kept prefill with a quadratically smaller attention
        // term can only help.
        let spec = ModelConfig::preset("llama8b").unwrap();
        let base = ModelConfig::preset("llama405b").unwrap();
        let r = relative_flops(&spec, &base, 1, 32768).unwrap();
        let linear = speedup_upper_bound(r, 0.1).unwrap();
        let quad = speedup_quadratic(&spec, &base, 1, 32768, 0.1).unwrap();
        assert!(quad >= linear, "quad {quad} vs linear {linear}");
    }
}
