#ifndef CONTEXT_MAPS_H
#define CONTEXT_MAPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum cm_status {
  CM_STATUS_OK = 0,
  CM_STATUS_NULL_POINTER = 1,
  CM_STATUS_INVALID_ARGUMENT = 2,
  CM_STATUS_IO = 3,
  CM_STATUS_FORMAT = 4,
  CM_STATUS_SHAPE = 5,
  CM_STATUS_MISSING_MAP = 6,
  CM_STATUS_PANIC = 7,
  CM_STATUS_INTERNAL = 8,
} cm_status;

/**
 * A loaded checkpoint: model parameters plus per-scene maps.
 */
typedef struct cm_model cm_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *cm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cm_version(void);

/**
 * Loads a training checkpoint.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 * The handle written to `*out` must be released with [`cm_model_free`].
 */
enum cm_status cm_model_load(const char *path, struct cm_model **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`cm_model_load`] and not have been freed.
 */
void cm_model_free(struct cm_model *model);

/**
 * Observation and prediction lengths the model was trained with.
 *
 * # Safety
 * All pointers must be valid.
 */
enum cm_status cm_model_lengths(const struct cm_model *model, size_t *obs_len, size_t *pred_len);

/**
 * Predicts `pred_len` future positions for `n_agents` agents observed
 * together in scene `scene_id`.
 *
 * `observed` holds `n_agents * obs_len * 2` values and `out` receives
 * `n_agents * pred_len * 2`. `seed` fixes the generator noise.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum cm_status cm_model_predict(const struct cm_model *model,
                                const char *scene_id,
                                const double *observed,
                                size_t n_agents,
                                uint64_t seed,
                                double *out);

/**
 * Constant-acceleration Kalman rollout of one trajectory. `observed` holds
 * `obs_len * 2` values (at least 3 positions), `out` receives `steps * 2`.
 * `fallback`, if non-null, is set to 1 when constant-velocity extrapolation
 * replaced a failed fit.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum cm_status cm_kalman_predict(const double *observed,
                                 size_t obs_len,
                                 size_t steps,
                                 double *out,
                                 int32_t *fallback);

/**
 * Average displacement error over `n` trajectories of `steps` positions.
 *
 * # Safety
 * `pred` and `truth` must hold `n * steps * 2` values; `out` must be valid.
 */
enum cm_status cm_ade(const double *pred, const double *truth, size_t n, size_t steps, double *out);

/**
 * Final displacement error over `n` trajectories of `steps` positions.
 *
 * # Safety
 * As for [`cm_ade`].
 */
enum cm_status cm_fde(const double *pred, const double *truth, size_t n, size_t steps, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONTEXT_MAPS_H */
