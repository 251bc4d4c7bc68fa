#ifndef STOPLAB_H
#define STOPLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Feature source for [`stoplab_model_features`].
 */
typedef enum StoplabFeatures {
  STOPLAB_FEATURES_LAST_LAYER = 0,
  STOPLAB_FEATURES_LAST4 = 1,
} StoplabFeatures;

/**
 * Result of every fallible call.
 */
typedef enum StoplabStatus {
  STOPLAB_STATUS_OK = 0,
  STOPLAB_STATUS_NULL_POINTER = 1,
  STOPLAB_STATUS_INVALID_UTF8 = 2,
  STOPLAB_STATUS_CONFIG = 3,
  STOPLAB_STATUS_USAGE = 4,
  STOPLAB_STATUS_FORMAT = 5,
  STOPLAB_STATUS_IO = 6,
  STOPLAB_STATUS_DIMENSION = 7,
  STOPLAB_STATUS_NON_FINITE = 8,
  STOPLAB_STATUS_STATISTICAL = 9,
  STOPLAB_STATUS_INTERNAL = 10,
  STOPLAB_STATUS_PANIC = 11,
  STOPLAB_STATUS_BUFFER_TOO_SMALL = 12,
} StoplabStatus;

/**
 * Opaque run configuration.
 */
typedef struct StoplabConfig StoplabConfig;

/**
 * Opaque trained or loaded model.
 */
typedef struct StoplabModel StoplabModel;

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes, excluding the terminator; 0 means no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t stoplab_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *stoplab_version(void);

/**
 * Creates a configuration holding the documented defaults.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum StoplabStatus stoplab_config_new(struct StoplabConfig **out);

/**
 * Loads a `key = value` config file on top of the defaults.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum StoplabStatus stoplab_config_load(const char *path, struct StoplabConfig **out);

/**
 * Sets one dotted key, for example `stop.sigma` to `0.5`.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum StoplabStatus stoplab_config_set(struct StoplabConfig *cfg,
                                      const char *key,
                                      const char *value);

/**
 * Copies the value of `key` into `buf` (NUL-terminated). `needed`, if not
 * null, receives the value length excluding the terminator.
 *
 * # Safety
 * `cfg` must be a live handle, `key` NUL-terminated, and `buf` null or
 * `len` writable bytes.
 */
enum StoplabStatus stoplab_config_get(const struct StoplabConfig *cfg,
                                      const char *key,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

/**
 * Releases a configuration. Null is ignored.
 *
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void stoplab_config_free(struct StoplabConfig *cfg);

/**
 * Pretrains a model with `cfg`. `run_dir` may be null; otherwise the
 * resolved config, metrics and checkpoints are written there.
 *
 * # Safety
 * `cfg` must be a live handle, `run_dir` null or NUL-terminated, `out` a
 * valid handle slot.
 */
enum StoplabStatus stoplab_pretrain(const struct StoplabConfig *cfg,
                                    const char *run_dir,
                                    struct StoplabModel **out);

/**
 * Loads a checkpoint written by training or [`stoplab_model_save`].
 *
 * # Safety
 * `cfg` must be a live handle, `path` NUL-terminated, `out` a valid slot.
 */
enum StoplabStatus stoplab_model_load(const struct StoplabConfig *cfg,
                                      const char *path,
                                      struct StoplabModel **out);

/**
 * Writes the model parameters as a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum StoplabStatus stoplab_model_save(const struct StoplabModel *model, const char *path);

/**
 * Frobenius norm of the shared projection `A` and L2 norm of `m_tilde`.
 *
 * # Safety
 * `model` must be a live handle; the outputs valid pointers.
 */
enum StoplabStatus stoplab_model_norms(const struct StoplabModel *model,
                                       double *norm_a,
                                       double *norm_m_tilde);

/**
 * Feature width per image for `source`: `d_e` or `4 d_e`.
 *
 * # Safety
 * `model` must be a live handle and `width` a valid pointer.
 */
enum StoplabStatus stoplab_model_feature_width(const struct StoplabModel *model,
                                               enum StoplabFeatures source,
                                               size_t *width);

/**
 * Frozen-encoder features for `n` images of `h x w x c` pixels in `[0, 1]`,
 * row-major. Writes `n * width` floats to `out`, which holds `out_len`.
 *
 * # Safety
 * `model` must be a live handle, `images` point to `n*h*w*c` floats and
 * `out` to `out_len` writable floats.
 */
enum StoplabStatus stoplab_model_features(const struct StoplabModel *model,
                                          const float *images,
                                          size_t n,
                                          size_t h,
                                          size_t w,
                                          size_t c,
                                          enum StoplabFeatures source,
                                          float *out,
                                          size_t out_len);

/**
 * Copies the model's configuration into a new handle.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid slot.
 */
enum StoplabStatus stoplab_model_config(const struct StoplabModel *model,
                                        struct StoplabConfig **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void stoplab_model_free(struct StoplabModel *model);

/**
 * Runs the theory checks with default sizes. `passed` receives 1 when no
 * check failed. A failing check is not an error status; it is reported
 * through `passed`.
 *
 * # Safety
 * `passed` must be a valid pointer.
 */
enum StoplabStatus stoplab_verify(uint64_t seed, size_t num_noise, int32_t *passed);

#endif  /* STOPLAB_H */
