//! Speculative prefill at desk scale: a small speculator transformer scores
//! prompt tokens by aggregated attention, a base transformer prefills only
//! the selected chunks at their original positions, and companion modules
//! provide the closed-form FLOPS/overhead model and a constant-QPS serving
//! simulator.

pub mod analytic;
pub mod config;
pub mod error;
pub mod harness;
pub mod math;
pub mod model;
pub mod serving_sim;
pub mod speculation;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{
    attention_scores, init_model, load_checkpoint, save_checkpoint, AttentionTensor,
    CapturedQueries, KVCache, Model,
};
pub use speculation::{
    compute_token_importance, generate_baseline, generate_with_spec, look_ahead,
    restore_position_ids, select_chunks, smooth_scores, speculate_prefill, speculate_prompt,
    SpecConfig, SpeculatedPrompt,
};
