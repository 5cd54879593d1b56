#ifndef AGENTRL_H
#define AGENTRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum AgentrlStatus {
  AGENTRL_STATUS_OK = 0,
  AGENTRL_STATUS_NULL_POINTER = 1,
  AGENTRL_STATUS_INVALID_STRING = 2,
  AGENTRL_STATUS_CONFIG = 3,
  AGENTRL_STATUS_IO = 4,
  AGENTRL_STATUS_DATA = 5,
  AGENTRL_STATUS_RUNTIME = 6,
  /**
   * The output buffer is too small; the required size was still written.
   */
  AGENTRL_STATUS_BUFFER_TOO_SMALL = 7,
  AGENTRL_STATUS_PANIC = 8,
} AgentrlStatus;

/**
 * A task catalog.
 */
typedef struct AgentrlCatalog AgentrlCatalog;

/**
 * Policy parameters.
 */
typedef struct AgentrlPolicy AgentrlPolicy;

/**
 * The outcome of a finished training run.
 */
typedef struct AgentrlRun AgentrlRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be null; `needed` may be null.
 */
enum AgentrlStatus agentrl_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Initializes a policy. `model_json` holds model config overrides (`"{}"`
 * for defaults); it may be null.
 *
 * # Safety
 * `model_json` must be null or a NUL-terminated string; `out` must be valid.
 */
enum AgentrlStatus agentrl_policy_new(const char *model_json,
                                      uint64_t seed,
                                      struct AgentrlPolicy **out);

/**
 * Reads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum AgentrlStatus agentrl_policy_load(const char *path, struct AgentrlPolicy **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `policy` must come from this library; `path` must be a NUL-terminated string.
 */
enum AgentrlStatus agentrl_policy_save(const struct AgentrlPolicy *policy, const char *path);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `policy` must come from this library; `out` must be valid.
 */
enum AgentrlStatus agentrl_policy_param_count(const struct AgentrlPolicy *policy, size_t *out);

/**
 * Log-probability of `action` following `context`.
 *
 * # Safety
 * Token arrays must hold the given number of elements; `out` must be valid.
 */
enum AgentrlStatus agentrl_policy_log_prob(const struct AgentrlPolicy *policy,
                                           const uint32_t *context,
                                           size_t context_len,
                                           const uint32_t *action,
                                           size_t action_len,
                                           double *out);

/**
 * Samples up to `max_tokens` tokens after `context`, stopping after an
 * end-of-turn token. Writes at most `cap` tokens to `out_tokens` and the
 * sampled count to `out_len`.
 *
 * # Safety
 * `context` must hold `context_len` tokens and `out_tokens` `cap` slots.
 */
enum AgentrlStatus agentrl_policy_sample(const struct AgentrlPolicy *policy,
                                         const uint32_t *context,
                                         size_t context_len,
                                         size_t max_tokens,
                                         uint64_t seed,
                                         uint32_t *out_tokens,
                                         size_t cap,
                                         size_t *out_len);

/**
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void agentrl_policy_free(struct AgentrlPolicy *policy);

/**
 * The seeded builtin catalog.
 *
 * # Safety
 * `out` must be valid.
 */
enum AgentrlStatus agentrl_catalog_builtin(uint64_t seed, struct AgentrlCatalog **out);

/**
 * Reads a catalog file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum AgentrlStatus agentrl_catalog_load(const char *path, struct AgentrlCatalog **out);

/**
 * Number of tasks.
 *
 * # Safety
 * `catalog` must come from this library; `out` must be valid.
 */
enum AgentrlStatus agentrl_catalog_len(const struct AgentrlCatalog *catalog, size_t *out);

/**
 * Copies the id of task `index` into `buf`.
 *
 * # Safety
 * `catalog` must come from this library; `buf` must hold `cap` bytes.
 */
enum AgentrlStatus agentrl_catalog_task_id(const struct AgentrlCatalog *catalog,
                                           size_t index,
                                           char *buf,
                                           size_t cap,
                                           size_t *needed);

/**
 * # Safety
 * `catalog` must come from this library and not be used afterwards.
 */
void agentrl_catalog_free(struct AgentrlCatalog *catalog);

/**
 * Runs a training experiment from a JSON config. Output files are written
 * under `out_dir` unless it is null.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `out_dir` null or one;
 * `out` must be valid.
 */
enum AgentrlStatus agentrl_run(const char *config_json,
                               const char *out_dir,
                               struct AgentrlRun **out);

/**
 * Number of parameter updates the run applied.
 *
 * # Safety
 * `run` must come from this library; `out` must be valid.
 */
enum AgentrlStatus agentrl_run_update_count(const struct AgentrlRun *run, uint64_t *out);

/**
 * Copies the run's yield report, as JSON, into `buf`.
 *
 * # Safety
 * `run` must come from this library; `buf` must hold `cap` bytes.
 */
enum AgentrlStatus agentrl_run_report_json(const struct AgentrlRun *run,
                                           char *buf,
                                           size_t cap,
                                           size_t *needed);

/**
 * A copy of the run's final policy.
 *
 * # Safety
 * `run` must come from this library; `out` must be valid.
 */
enum AgentrlStatus agentrl_run_policy(const struct AgentrlRun *run, struct AgentrlPolicy **out);

/**
 * # Safety
 * `run` must come from this library and not be used afterwards.
 */
void agentrl_run_free(struct AgentrlRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGENTRL_H */
