#ifndef PROFINFER_H
#define PROFINFER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PiStatus {
  PI_STATUS_OK = 0,
  PI_STATUS_NULL_ARGUMENT = 1,
  PI_STATUS_INVALID_UTF8 = 2,
  PI_STATUS_IO = 3,
  PI_STATUS_PARSE = 4,
  PI_STATUS_INGEST = 5,
  PI_STATUS_DAG_UNAVAILABLE = 6,
  PI_STATUS_UNKNOWN_ITERATION = 7,
  PI_STATUS_METRIC_UNAVAILABLE = 8,
  PI_STATUS_DOMAIN = 9,
  PI_STATUS_INTERNAL = 10,
} PiStatus;

typedef enum PiSchedSemantics {
  PI_SCHED_SEMANTICS_COMPAT = 0,
  PI_SCHED_SEMANTICS_KERNEL = 1,
} PiSchedSemantics;

/**
 * Operator graph of one iteration.
 */
typedef struct PiDag PiDag;

/**
 * A loaded trace session.
 */
typedef struct PiSession PiSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next profinfer call on the same thread.
 */
const char *pi_last_error(void);

/**
 * Opens a session file (JSON Lines or binary).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PiStatus pi_session_open(const char *path, struct PiSession **out);

/**
 * # Safety
 * `session` must come from [`pi_session_open`] and not be freed twice.
 */
void pi_session_free(struct PiSession *session);

/**
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum PiStatus pi_session_event_count(const struct PiSession *session, size_t *out);

/**
 * Counts trace-model violations. Zero means the session is well formed.
 *
 * # Safety
 * `session` must be a live handle and `violations` a valid pointer.
 */
enum PiStatus pi_session_validate(const struct PiSession *session, size_t *violations);

/**
 * Chrome trace JSON for the whole session.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum PiStatus pi_session_chrome_trace(const struct PiSession *session,
                                      enum PiSchedSemantics semantics,
                                      char **out);

/**
 * Builds the operator graph of `iteration`.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum PiStatus pi_dag_build(const struct PiSession *session, size_t iteration, struct PiDag **out);

/**
 * # Safety
 * `dag` must come from [`pi_dag_build`] and not be freed twice.
 */
void pi_dag_free(struct PiDag *dag);

/**
 * Number of op nodes, constants excluded.
 *
 * # Safety
 * `dag` must be a live handle and `out` a valid pointer.
 */
enum PiStatus pi_dag_op_count(const struct PiDag *dag, size_t *out);

/**
 * DOT text colored by `metric` (elapsed, bandwidth, refills, stalled or a
 * counter name).
 *
 * # Safety
 * `dag` must be a live handle, `metric` NUL-terminated and `out` valid.
 */
enum PiStatus pi_dag_to_dot(const struct PiDag *dag,
                            const char *metric,
                            size_t palette_size,
                            char **out);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pi_string_free(char *s);

/**
 * Probe cost as a share of total thread time.
 *
 * # Safety
 * `costs_ns` must point to `n` values (or be null with `n == 0`); `out`
 * must be valid.
 */
enum PiStatus pi_probe_overhead(const uint64_t *costs_ns,
                                size_t n,
                                uint64_t runtime_ns,
                                uint32_t nthreads,
                                double *out);

/**
 * M·N·K·H of a matrix multiplication.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PiStatus pi_matmul_complexity(uint64_t m, uint64_t n, uint64_t k, uint64_t h, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROFINFER_H */
