#ifndef HYBRID_GRAPH_H
#define HYBRID_GRAPH_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HgStatus {
  HG_STATUS_OK = 0,
  HG_STATUS_NULL_POINTER = 1,
  HG_STATUS_INVALID_ARGUMENT = 2,
  HG_STATUS_PROMPT_TOO_LONG = 3,
  HG_STATUS_TOKEN_OUT_OF_RANGE = 4,
  HG_STATUS_CACHE_CAPACITY = 5,
  HG_STATUS_GRAPH_ERROR = 6,
  HG_STATUS_IO = 7,
  HG_STATUS_INTERNAL = 8,
} HgStatus;

typedef enum HgRunMode {
  HG_RUN_MODE_EAGER = 0,
  HG_RUN_MODE_HYBRID = 1,
  HG_RUN_MODE_GRAPH_ONLY = 2,
  HG_RUN_MODE_ABLATE_ASYNC = 3,
  HG_RUN_MODE_ABLATE_FUSED = 4,
  HG_RUN_MODE_ABLATE_BOTH = 5,
} HgRunMode;

/**
 * Opaque engine handle.
 */
typedef struct HgEngine HgEngine;

/**
 * Opaque generation result handle.
 */
typedef struct HgResult HgResult;

typedef struct HgModelConfig {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t vocab;
  size_t max_seq;
  uint64_t seed;
} HgModelConfig;

/**
 * Engine options. A warm-up range with `warmup_lo == 0` disables warm-up.
 */
typedef struct HgEngineOptions {
  enum HgRunMode mode;
  size_t warmup_lo;
  size_t warmup_hi;
  size_t cache_capacity;
  bool prefill_uses_graphs;
} HgEngineOptions;

/**
 * Costs in virtual microseconds. `jitter_sigma == 0` disables jitter.
 */
typedef struct HgCostModel {
  double launch_overhead_us;
  double host_dispatch_us;
  double alpha_us_per_mflop;
  double capture_cost_us_per_kernel;
  double jitter_sigma;
  uint64_t jitter_seed;
} HgCostModel;

typedef struct HgCounters {
  uint64_t dispatches;
  uint64_t kernel_launches;
  uint64_t graph_replays;
  uint64_t captures;
  uint64_t fused_blocks;
  uint64_t cache_hits;
  uint64_t cache_misses;
  uint64_t replay_steps;
  uint64_t fallback_steps;
} HgCounters;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *hg_last_error(void);

/**
 * Static description of a status code.
 */
const char *hg_status_str(enum HgStatus status);

struct HgModelConfig hg_model_config_default(void);

struct HgEngineOptions hg_engine_options_default(void);

struct HgCostModel hg_cost_model_default(void);

/**
 * Builds the model and a warmed engine. On success `*out` owns a handle to
 * release with [`hg_engine_free`].
 *
 * # Safety
 * `model`, `options` and `out` must be valid pointers or null.
 */
enum HgStatus hg_engine_new(const struct HgModelConfig *model,
                            const struct HgEngineOptions *options,
                            struct HgEngine **out);

/**
 * # Safety
 * `engine` must come from [`hg_engine_new`] and not be used afterwards.
 */
void hg_engine_free(struct HgEngine *engine);

/**
 * Number of graphs currently cached by the engine, or 0 for null.
 *
 * # Safety
 * `engine` must be a live handle or null.
 */
size_t hg_engine_cached_graphs(const struct HgEngine *engine);

/**
 * Generates `n` tokens after `prompt`. Graphs persist in the engine across
 * calls. On success `*out` owns a result to release with
 * [`hg_result_free`].
 *
 * # Safety
 * `engine` must be a live handle, `prompt` must point to `prompt_len`
 * tokens, `cost` and `out` must be valid.
 */
enum HgStatus hg_engine_generate(struct HgEngine *engine,
                                 const uint32_t *prompt,
                                 size_t prompt_len,
                                 size_t n,
                                 const struct HgCostModel *cost,
                                 struct HgResult **out);

/**
 * # Safety
 * `result` must come from [`hg_engine_generate`] and not be used
 * afterwards.
 */
void hg_result_free(struct HgResult *result);

/**
 * Generated tokens; the array lives as long as the result.
 *
 * # Safety
 * `result` must be a live handle; `len` must be valid.
 */
const uint32_t *hg_result_tokens(const struct HgResult *result, size_t *len);

/**
 * Per-token latencies in virtual microseconds; the array lives as long as
 * the result.
 *
 * # Safety
 * `result` must be a live handle; `len` must be valid.
 */
const double *hg_result_per_token_us(const struct HgResult *result, size_t *len);

/**
 * Time to first token in virtual microseconds, or NaN for null.
 *
 * # Safety
 * `result` must be a live handle or null.
 */
double hg_result_ttft_us(const struct HgResult *result);

/**
 * # Safety
 * `result` must be a live handle and `out` valid.
 */
enum HgStatus hg_result_counters(const struct HgResult *result, struct HgCounters *out);

/**
 * Nearest-rank percentile of `len` samples.
 *
 * # Safety
 * `samples` must point to `len` doubles; `out` must be valid.
 */
enum HgStatus hg_percentile(const double *samples, size_t len, double p, double *out);

/**
 * Runs a benchmark described by flat `section.key = value` text and writes
 * the CSV to `out_path`.
 *
 * # Safety
 * Both arguments must be valid NUL-terminated strings.
 */
enum HgStatus hg_bench_run_csv(const char *config, const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRID_GRAPH_H */
