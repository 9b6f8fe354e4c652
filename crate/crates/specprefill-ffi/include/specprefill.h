/* specprefill C ABI */

#ifndef SPECPREFILL_H
#define SPECPREFILL_H

/* Generated by cbindgen from specprefill-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  /**
   * A null pointer where a value was required.
   */
  SP_STATUS_NULL_POINTER = 1,
  /**
   * Invalid model or speculation configuration.
   */
  SP_STATUS_CONFIG = 2,
  /**
   * Invalid argument (empty prompt, bad token id, buffer too small, ...).
   */
  SP_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Position-id ordering or range violation.
   */
  SP_STATUS_POSITION = 4,
  /**
   * KV cache capacity exceeded.
   */
  SP_STATUS_CAPACITY = 5,
  /**
   * Aggregation received zero valid rows.
   */
  SP_STATUS_EMPTY_AGGREGATION = 6,
  /**
   * Malformed, truncated, or shape-inconsistent checkpoint.
   */
  SP_STATUS_CHECKPOINT = 7,
  /**
   * Underlying I/O failure.
   */
  SP_STATUS_IO = 8,
  /**
   * Non-UTF-8 path argument.
   */
  SP_STATUS_UTF8 = 9,
  /**
   * A panic crossed the boundary; state may be inconsistent.
   */
  SP_STATUS_INTERNAL = 10,
} SpStatus;

/**
 * Opaque model handle.
 */
typedef struct SpModel SpModel;

/**
 * Opaque speculated-prompt handle.
 */
typedef struct SpSpeculatedPrompt SpSpeculatedPrompt;

/**
 * Transformer architecture parameters (mirror of the Rust model config).
 */
typedef struct SpModelConfig {
  uint64_t num_layers;
  uint64_t hidden_size;
  uint64_t intermediate_size;
  uint64_t num_query_heads;
  uint64_t num_kv_heads;
  uint64_t vocab_size;
  uint64_t head_dim;
  uint64_t max_position;
  double rope_theta;
} SpModelConfig;

/**
 * Speculation pipeline knobs (mirror of the Rust spec config).
 */
typedef struct SpSpecConfig {
  double keep_rate;
  uint64_t chunk_size;
  uint64_t pool_window;
  uint64_t look_ahead_steps;
  uint32_t eos_token_id;
} SpSpecConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. Valid until
 * the next failing call from the same thread.
 */
const char *sp_last_error_message(void);

/**
 * Build a model with deterministic weights from `(config, seed)`.
 *
 * # Safety
 * `config` and `out_model` must be valid pointers; the returned handle must
 * be released with [`sp_model_free`].
 */
enum SpStatus sp_model_init(const struct SpModelConfig *config,
                            uint64_t seed,
                            struct SpModel **out_model);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` a valid pointer;
 * release the handle with [`sp_model_free`].
 */
enum SpStatus sp_model_load(const char *path, struct SpModel **out_model);

/**
 * Save a model to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum SpStatus sp_model_save(const struct SpModel *model, const char *path);

/**
 * Read a model's configuration.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum SpStatus sp_model_config(const struct SpModel *model, struct SpModelConfig *out_config);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void sp_model_free(struct SpModel *model);

/**
 * Run the speculation pipeline on one prompt.
 *
 * # Safety
 * `speculator` must be live, `tokens` must point at `token_count` ids,
 * `config` and `out_prompt` must be valid; release the handle with
 * [`sp_prompt_free`].
 */
enum SpStatus sp_speculate(const struct SpModel *speculator,
                           const uint32_t *tokens,
                           size_t token_count,
                           const struct SpSpecConfig *config,
                           struct SpSpeculatedPrompt **out_prompt);

/**
 * Number of kept tokens; 0 for a null handle.
 *
 * # Safety
 * `prompt` must be live or null.
 */
size_t sp_prompt_kept_len(const struct SpSpeculatedPrompt *prompt);

/**
 * Original context length of the speculated prompt.
 *
 * # Safety
 * `prompt` must be live or null.
 */
size_t sp_prompt_context_len(const struct SpSpeculatedPrompt *prompt);

/**
 * Position at which decoding resumes (the original context length).
 *
 * # Safety
 * `prompt` must be live or null.
 */
size_t sp_prompt_first_decode_position(const struct SpSpeculatedPrompt *prompt);

/**
 * Copy kept token ids and their original positions into caller buffers of
 * capacity `cap`. Either output pointer may be null to skip that column.
 *
 * # Safety
 * Non-null buffers must hold at least `cap` elements.
 */
enum SpStatus sp_prompt_copy_kept(const struct SpSpeculatedPrompt *prompt,
                                  uint32_t *tokens_out,
                                  uint64_t *positions_out,
                                  size_t cap);

/**
 * Release a speculated-prompt handle. Null is a no-op.
 *
 * # Safety
 * `prompt` must have come from this library and not be freed twice.
 */
void sp_prompt_free(struct SpSpeculatedPrompt *prompt);

/**
 * Greedy generation. Pass a null `speculator` for the unspeculated
 * baseline. Writes up to `out_cap` generated ids and the produced count.
 *
 * # Safety
 * `base` must be live, `tokens` must point at `token_count` ids, `out`
 * must hold `out_cap` elements, and `out_len` must be valid.
 */
enum SpStatus sp_generate(const struct SpModel *base,
                          const struct SpModel *speculator,
                          const uint32_t *tokens,
                          size_t token_count,
                          const struct SpSpecConfig *config,
                          size_t max_new_tokens,
                          uint32_t *out,
                          size_t out_cap,
                          size_t *out_len);

/**
 * Total analytic FLOPS (MACs) for one forward over a `[batch, seq_len]`
 * grid, as f64.
 *
 * # Safety
 * `config` and `out_total` must be valid pointers.
 */
enum SpStatus sp_flops_total(const struct SpModelConfig *config,
                             uint64_t batch,
                             uint64_t seq_len,
                             double *out_total);

/**
 * `FLOPS(spec) / FLOPS(base)` at the same batch and sequence length.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SpStatus sp_relative_flops(const struct SpModelConfig *spec,
                                const struct SpModelConfig *base,
                                uint64_t batch,
                                uint64_t seq_len,
                                double *out_ratio);

/**
 * Speculation overhead `r / (r + keep_rate)`.
 *
 * # Safety
 * `out_overhead` must be valid.
 */
enum SpStatus sp_overhead(double flops_ratio, double keep_rate, double *out_overhead);

/**
 * Theoretical TTFT speedup bound `1 / (r + keep_rate)`.
 *
 * # Safety
 * `out_speedup` must be valid.
 */
enum SpStatus sp_speedup_upper_bound(double flops_ratio, double keep_rate, double *out_speedup);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SPECPREFILL_H */
