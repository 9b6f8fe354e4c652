//! C ABI over the speculative prefill toolkit.
//!
//! Conventions: every fallible call returns an [`SpStatus`]; outputs go
//! through out-pointers; models and speculated prompts are opaque handles
//! freed with their `_free` function; `sp_last_error_message` returns a
//! thread-local NUL-terminated description of the most recent failure.
//! Panics are caught at the boundary and reported as `SP_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use specprefill::analytic;
use specprefill::config::ModelConfig;
use specprefill::error::Error;
use specprefill::model::{init_model, load_checkpoint, save_checkpoint, Model};
use specprefill::speculation::{
    generate_baseline, generate_with_spec, speculate_prompt, SpecConfig, SpeculatedPrompt,
};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    /// A null pointer where a value was required.
    NullPointer = 1,
    /// Invalid model or speculation configuration.
    Config = 2,
    /// Invalid argument (empty prompt, bad token id, buffer too small, ...).
    InvalidArgument = 3,
    /// Position-id ordering or range violation.
    Position = 4,
    /// KV cache capacity exceeded.
    Capacity = 5,
    /// Aggregation received zero valid rows.
    EmptyAggregation = 6,
    /// Malformed, truncated, or shape-inconsistent checkpoint.
    Checkpoint = 7,
    /// Underlying I/O failure.
    Io = 8,
    /// Non-UTF-8 path argument.
    Utf8 = 9,
    /// A panic crossed the boundary; state may be inconsistent.
    Internal = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|b| *b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> SpStatus {
    match err {
        Error::Config(_) => SpStatus::Config,
        Error::InvalidArgument(_) | Error::BadRequestLine { .. } => SpStatus::InvalidArgument,
        Error::Position(_) => SpStatus::Position,
        Error::Capacity(_) => SpStatus::Capacity,
        Error::EmptyAggregation => SpStatus::EmptyAggregation,
        Error::CheckpointFormat(_) | Error::ShapeMismatch { .. } | Error::TruncatedPayload { .. } => {
            SpStatus::Checkpoint
        }
        Error::Io(_) => SpStatus::Io,
    }
}

fn fail(err: Error) -> SpStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn guard(f: impl FnOnce() -> SpStatus) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SpStatus::Internal
        }
    }
}

/// Message describing the most recent failure on this thread. Valid until
/// the next failing call from the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Transformer architecture parameters (mirror of the Rust model config).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpModelConfig {
    pub num_layers: u64,
    pub hidden_size: u64,
    pub intermediate_size: u64,
    pub num_query_heads: u64,
    pub num_kv_heads: u64,
    pub vocab_size: u64,
    pub head_dim: u64,
    pub max_position: u64,
    pub rope_theta: f64,
}

impl SpModelConfig {
    fn to_rust(self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers as usize,
            hidden_size: self.hidden_size as usize,
            intermediate_size: self.intermediate_size as usize,
            num_query_heads: self.num_query_heads as usize,
            num_kv_heads: self.num_kv_heads as usize,
            vocab_size: self.vocab_size as usize,
            head_dim: self.head_dim as usize,
            max_position: self.max_position as usize,
            rope_theta: self.rope_theta,
        }
    }

    fn from_rust(cfg: &ModelConfig) -> Self {
        SpModelConfig {
            num_layers: cfg.num_layers as u64,
            hidden_size: cfg.hidden_size as u64,
            intermediate_size: cfg.intermediate_size as u64,
            num_query_heads: cfg.num_query_heads as u64,
            num_kv_heads: cfg.num_kv_heads as u64,
            vocab_size: cfg.vocab_size as u64,
            head_dim: cfg.head_dim as u64,
            max_position: cfg.max_position as u64,
            rope_theta: cfg.rope_theta,
        }
    }
}

/// Speculation pipeline knobs (mirror of the Rust spec config).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpSpecConfig {
    pub keep_rate: f64,
    pub chunk_size: u64,
    pub pool_window: u64,
    pub look_ahead_steps: u64,
    pub eos_token_id: u32,
}

impl SpSpecConfig {
    fn to_rust(self) -> SpecConfig {
        SpecConfig {
            keep_rate: self.keep_rate,
            chunk_size: self.chunk_size as usize,
            pool_window: self.pool_window as usize,
            look_ahead_steps: self.look_ahead_steps as usize,
            eos_token_id: self.eos_token_id,
        }
    }
}

/// Opaque model handle.
pub struct SpModel {
    inner: Model,
}

/// Opaque speculated-prompt handle.
pub struct SpSpeculatedPrompt {
    inner: SpeculatedPrompt,
}

unsafe fn path_from(ptr: *const c_char) -> Result<String, SpStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(SpStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(SpStatus::Utf8)
        }
    }
}

/// Build a model with deterministic weights from `(config, seed)`.
///
/// # Safety
/// `config` and `out_model` must be valid pointers; the returned handle must
/// be released with [`sp_model_free`].
#[no_mangle]
pub unsafe extern "C" fn sp_model_init(
    config: *const SpModelConfig,
    seed: u64,
    out_model: *mut *mut SpModel,
) -> SpStatus {
    guard(|| {
        if config.is_null() || out_model.is_null() {
            set_error("null pointer argument");
            return SpStatus::NullPointer;
        }
        match init_model(&(*config).to_rust(), seed) {
            Ok(model) => {
                *out_model = Box::into_raw(Box::new(SpModel { inner: model }));
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer;
/// release the handle with [`sp_model_free`].
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(
    path: *const c_char,
    out_model: *mut *mut SpModel,
) -> SpStatus {
    guard(|| {
        if out_model.is_null() {
            set_error("null out_model");
            return SpStatus::NullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(&path) {
            Ok(model) => {
                *out_model = Box::into_raw(Box::new(SpModel { inner: model }));
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Save a model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_model_save(model: *const SpModel, path: *const c_char) -> SpStatus {
    guard(|| {
        if model.is_null() {
            set_error("null model");
            return SpStatus::NullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_checkpoint(&(*model).inner, &path) {
            Ok(()) => SpStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Read a model's configuration.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_model_config(
    model: *const SpModel,
    out_config: *mut SpModelConfig,
) -> SpStatus {
    guard(|| {
        if model.is_null() || out_config.is_null() {
            set_error("null pointer argument");
            return SpStatus::NullPointer;
        }
        *out_config = SpModelConfig::from_rust((*model).inner.config());
        SpStatus::Ok
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(model: *mut SpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Run the speculation pipeline on one prompt.
///
/// # Safety
/// `speculator` must be live, `tokens` must point at `token_count` ids,
/// `config` and `out_prompt` must be valid; release the handle with
/// [`sp_prompt_free`].
#[no_mangle]
pub unsafe extern "C" fn sp_speculate(
    speculator: *const SpModel,
    tokens: *const u32,
    token_count: usize,
    config: *const SpSpecConfig,
    out_prompt: *mut *mut SpSpeculatedPrompt,
) -> SpStatus {
    guard(|| {
        if speculator.is_null() || tokens.is_null() || config.is_null() || out_prompt.is_null() {
            set_error("null pointer argument");
            return SpStatus::NullPointer;
        }
        let prompt = std::slice::from_raw_parts(tokens, token_count);
        match speculate_prompt(&(*speculator).inner, prompt, &(*config).to_rust()) {
            Ok(p) => {
                *out_prompt = Box::into_raw(Box::new(SpSpeculatedPrompt { inner: p }));
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of kept tokens; 0 for a null handle.
///
/// # Safety
/// `prompt` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn sp_prompt_kept_len(prompt: *const SpSpeculatedPrompt) -> usize {
    if prompt.is_null() {
        return 0;
    }
    (*prompt).inner.kept_token_ids.len()
}

/// Original context length of the speculated prompt.
///
/// # Safety
/// `prompt` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn sp_prompt_context_len(prompt: *const SpSpeculatedPrompt) -> usize {
    if prompt.is_null() {
        return 0;
    }
    (*prompt).inner.original_context_len
}

/// Position at which decoding resumes (the original context length).
///
/// # Safety
/// `prompt` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn sp_prompt_first_decode_position(
    prompt: *const SpSpeculatedPrompt,
) -> usize {
    if prompt.is_null() {
        return 0;
    }
    (*prompt).inner.first_decode_position
}

/// Copy kept token ids and their original positions into caller buffers of
/// capacity `cap`. Either output pointer may be null to skip that column.
///
/// # Safety
/// Non-null buffers must hold at least `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn sp_prompt_copy_kept(
    prompt: *const SpSpeculatedPrompt,
    tokens_out: *mut u32,
    positions_out: *mut u64,
    cap: usize,
) -> SpStatus {
    guard(|| {
        if prompt.is_null() {
            set_error("null prompt");
            return SpStatus::NullPointer;
        }
        let inner = &(*prompt).inner;
        let n = inner.kept_token_ids.len();
        if cap < n {
            set_error("output buffer smaller than kept token count");
            return SpStatus::InvalidArgument;
        }
        if !tokens_out.is_null() {
            ptr::copy_nonoverlapping(inner.kept_token_ids.as_ptr(), tokens_out, n);
        }
        if !positions_out.is_null() {
            for (i, &p) in inner.kept_position_ids.iter().enumerate() {
                *positions_out.add(i) = p as u64;
            }
        }
        SpStatus::Ok
    })
}

/// Release a speculated-prompt handle. Null is a no-op.
///
/// # Safety
/// `prompt` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sp_prompt_free(prompt: *mut SpSpeculatedPrompt) {
    if !prompt.is_null() {
        drop(Box::from_raw(prompt));
    }
}

/// Greedy generation. Pass a null `speculator` for the unspeculated
/// baseline. Writes up to `out_cap` generated ids and the produced count.
///
/// # Safety
/// `base` must be live, `tokens` must point at `token_count` ids, `out`
/// must hold `out_cap` elements, and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_generate(
    base: *const SpModel,
    speculator: *const SpModel,
    tokens: *const u32,
    token_count: usize,
    config: *const SpSpecConfig,
    max_new_tokens: usize,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> SpStatus {
    guard(|| {
        if base.is_null() || tokens.is_null() || config.is_null() || out.is_null() || out_len.is_null()
        {
            set_error("null pointer argument");
            return SpStatus::NullPointer;
        }
        let prompt = std::slice::from_raw_parts(tokens, token_count);
        let spec = (*config).to_rust();
        let budget = max_new_tokens.min(out_cap);
        let generated = if speculator.is_null() {
            generate_baseline(&(*base).inner, prompt, spec.eos_token_id, budget)
        } else {
            generate_with_spec(&(*base).inner, &(*speculator).inner, prompt, &spec, budget)
                .map(|g| g.tokens)
        };
        match generated {
            Ok(tokens) => {
                ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
                *out_len = tokens.len();
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Total analytic FLOPS (MACs) for one forward over a `[batch, seq_len]`
/// grid, as f64.
///
/// # Safety
/// `config` and `out_total` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sp_flops_total(
    config: *const SpModelConfig,
    batch: u64,
    seq_len: u64,
    out_total: *mut f64,
) -> SpStatus {
    guard(|| {
        if config.is_null() || out_total.is_null() {
            set_error("null pointer argument");
            return SpStatus::NullPointer;
        }
        match analytic::flops_profile(&(*config).to_rust(), batch, seq_len) {
            Ok(p) => {
                *out_total = p.total_f64();
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// `FLOPS(spec) / FLOPS(base)` at the same batch and sequence length.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_relative_flops(
    spec: *const SpModelConfig,
    base: *const SpModelConfig,
    batch: u64,
    seq_len: u64,
    out_ratio: *mut f64,
) -> SpStatus {
    guard(|| {
        if spec.is_null() || base.is_null() || out_ratio.is_null() {
            set_error("null pointer argument");
            return SpStatus::NullPointer;
        }
        match analytic::relative_flops(&(*spec).to_rust(), &(*base).to_rust(), batch, seq_len) {
            Ok(r) => {
                *out_ratio = r;
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Speculation overhead `r / (r + keep_rate)`.
///
/// # Safety
/// `out_overhead` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_overhead(
    flops_ratio: f64,
    keep_rate: f64,
    out_overhead: *mut f64,
) -> SpStatus {
    guard(|| {
        if out_overhead.is_null() {
            set_error("null out_overhead");
            return SpStatus::NullPointer;
        }
        match analytic::overhead(flops_ratio, keep_rate) {
            Ok(v) => {
                *out_overhead = v;
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Theoretical TTFT speedup bound `1 / (r + keep_rate)`.
///
/// # Safety
/// `out_speedup` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sp_speedup_upper_bound(
    flops_ratio: f64,
    keep_rate: f64,
    out_speedup: *mut f64,
) -> SpStatus {
    guard(|| {
        if out_speedup.is_null() {
            set_error("null out_speedup");
            return SpStatus::NullPointer;
        }
        match analytic::speedup_upper_bound(flops_ratio, keep_rate) {
            Ok(v) => {
                *out_speedup = v;
                SpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
