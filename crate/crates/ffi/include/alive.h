#ifndef ALIVE_H
#define ALIVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AliveStatus {
  ALIVE_STATUS_OK = 0,
  ALIVE_STATUS_NULL_POINTER = 1,
  ALIVE_STATUS_INVALID_UTF8 = 2,
  ALIVE_STATUS_INVALID_ARGUMENT = 3,
  ALIVE_STATUS_CONFIG = 4,
  ALIVE_STATUS_ENGINE = 5,
  ALIVE_STATUS_PANIC = 6,
} AliveStatus;

/**
 * Opaque run configuration.
 */
typedef struct AliveConfig AliveConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *alive_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void alive_string_free(char *s);

/**
 * A config with every key at its default.
 */
struct AliveConfig *alive_config_new(void);

/**
 * Loads and validates a config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AliveStatus alive_config_load(const char *path, struct AliveConfig **out);

/**
 * Sets one key; `value` is parsed like a value in the config file.
 *
 * # Safety
 * `cfg` must come from this library; strings must be NUL-terminated.
 */
enum AliveStatus alive_config_set(struct AliveConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, freed once.
 */
void alive_config_free(struct AliveConfig *cfg);

/**
 * Items in one step's training batch.
 */
uint64_t alive_count_batch_items(uint64_t m, uint64_t n, bool warmup);

double alive_constructor_reward(double acc, double gate_epsilon, bool gated);

double alive_solver_reward(double hard, double soft, double lambda1_value);

/**
 * Soft-score weight for a reference answer of `tokens` tokens under `cfg`.
 *
 * # Safety
 * `cfg` must be a handle from this library; `out` must be writable.
 */
enum AliveStatus alive_lambda1(const struct AliveConfig *cfg, size_t tokens, double *out);

double alive_lambda3(uint64_t step, uint64_t warmup_steps);

double alive_clipped_term(double rho, double advantage, double eps_low, double eps_high);

/**
 * Group-standardized advantages of `rewards[0..len]`, written to
 * `advantages[0..len]`.
 *
 * # Safety
 * `rewards` and `advantages` must hold `len` doubles; `degenerate` must be
 * writable.
 */
enum AliveStatus alive_normalize_group(const double *rewards,
                                       size_t len,
                                       double sigma_floor,
                                       double *advantages,
                                       bool *degenerate);

/**
 * Runs (or resumes) a toy run in `run_dir`; the last completed step is
 * written to `last_step`.
 *
 * # Safety
 * `cfg` must be a handle from this library; `run_dir` NUL-terminated;
 * `last_step` null or writable.
 */
enum AliveStatus alive_toy_train(const struct AliveConfig *cfg,
                                 const char *run_dir,
                                 uint64_t *last_step);

/**
 * Windowed stats of a run as a JSON array. Free `*out` with
 * [`alive_string_free`].
 *
 * # Safety
 * `run_dir` must be NUL-terminated; `out` must be writable.
 */
enum AliveStatus alive_stats_json(const char *run_dir, size_t window, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALIVE_H */
