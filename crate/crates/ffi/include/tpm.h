#ifndef TPM_H
#define TPM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TpmStatus {
  TPM_STATUS_OK = 0,
  TPM_STATUS_NULL_POINTER = 1,
  TPM_STATUS_INVALID_ARGUMENT = 2,
  TPM_STATUS_DEGENERATE_CLOUD = 3,
  TPM_STATUS_DEGENERATE_MASK = 4,
  TPM_STATUS_SHAPE_MISMATCH = 5,
  TPM_STATUS_NUMERIC = 6,
  TPM_STATUS_FORMAT = 7,
  TPM_STATUS_VERSION = 8,
  TPM_STATUS_COMPATIBILITY = 9,
  TPM_STATUS_IO = 10,
  TPM_STATUS_BUFFER_TOO_SMALL = 11,
  TPM_STATUS_INTERNAL = 12,
} TpmStatus;

/**
 * A point cloud owned by the library.
 */
typedef struct TpmCloud TpmCloud;

/**
 * Model configuration plus weights, loaded from a checkpoint or freshly
 * initialized.
 */
typedef struct TpmModel TpmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. The pointer stays valid until the next call on the same thread.
 */
const char *tpm_last_error(void);

/**
 * Copy `n` points from `xyz` (`3n` floats, row-major) into a new cloud.
 *
 * # Safety
 * `xyz` must point to `3n` readable floats; `out` must be writable.
 */
enum TpmStatus tpm_cloud_new(const float *xyz, size_t n, struct TpmCloud **out);

/**
 * Sample a procedural shape of class `class_id` (0..8) with `n` points.
 *
 * # Safety
 * `out` must be writable.
 */
enum TpmStatus tpm_generate_shape(uint32_t class_id,
                                  size_t n,
                                  uint64_t seed,
                                  struct TpmCloud **out);

/**
 * # Safety
 * `cloud` must be a live handle; `out` must be writable.
 */
enum TpmStatus tpm_cloud_len(const struct TpmCloud *cloud, size_t *out);

/**
 * Class label, or -1 for an unlabeled cloud.
 *
 * # Safety
 * `cloud` must be a live handle; `out` must be writable.
 */
enum TpmStatus tpm_cloud_label(const struct TpmCloud *cloud, int64_t *out);

/**
 * Copy the points into `xyz`, which holds `capacity` floats (at least
 * `3 * len`).
 *
 * # Safety
 * `cloud` must be a live handle; `xyz` must hold `capacity` writable floats.
 */
enum TpmStatus tpm_cloud_points(const struct TpmCloud *cloud, float *xyz, size_t capacity);

/**
 * Centre on the centroid and scale into the unit ball, as a new cloud.
 *
 * # Safety
 * `cloud` must be a live handle; `out` must be writable.
 */
enum TpmStatus tpm_cloud_normalize(const struct TpmCloud *cloud, struct TpmCloud **out);

/**
 * # Safety
 * `cloud` must be null or a handle not yet freed.
 */
void tpm_cloud_free(struct TpmCloud *cloud);

/**
 * Farthest point sampling: write `k` distinct indices into `out`.
 *
 * # Safety
 * `cloud` must be a live handle; `out` must hold `k` writable entries.
 */
enum TpmStatus tpm_fps(const struct TpmCloud *cloud, size_t k, uint64_t seed, size_t *out);

/**
 * Symmetric Chamfer distance (mean squared nearest-neighbour distance in
 * both directions) between two point sets.
 *
 * # Safety
 * `a` and `b` must hold `3na` and `3nb` floats; `out` must be writable.
 */
enum TpmStatus tpm_chamfer(const float *a, size_t na, const float *b, size_t nb, double *out);

/**
 * Per-mask loss weights `m_i / sum(m)` for `n` ratios.
 *
 * # Safety
 * `ratios` and `out` must each hold `n` entries.
 */
enum TpmStatus tpm_loss_weights(const double *ratios, size_t n, double *out);

/**
 * The mask triple `(m0, 0.5, 1 - m0)`.
 *
 * # Safety
 * `out` must hold 3 writable doubles.
 */
enum TpmStatus tpm_derive_mask_triple(double m0, double *out);

/**
 * Load weights and model configuration from a `.tpmc` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TpmStatus tpm_model_load(const char *path, struct TpmModel **out);

/**
 * Randomly initialized model with the small desk configuration.
 *
 * # Safety
 * `out` must be writable.
 */
enum TpmStatus tpm_model_init_desk(uint64_t seed, struct TpmModel **out);

/**
 * Length of the global feature vector produced by `model`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum TpmStatus tpm_model_feature_dim(const struct TpmModel *model, size_t *out);

/**
 * Points per cloud expected by `model`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum TpmStatus tpm_model_points(const struct TpmModel *model, size_t *out);

/**
 * Pooled encoder feature of `cloud`. A negative `mask_ratio` encodes every
 * patch; otherwise that fraction is hidden with a mask drawn from `seed`.
 *
 * # Safety
 * Handles must be live; `out` must hold `capacity` writable floats.
 */
enum TpmStatus tpm_global_feature(const struct TpmModel *model,
                                  const struct TpmCloud *cloud,
                                  double mask_ratio,
                                  uint64_t seed,
                                  float *out,
                                  size_t capacity);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tpm_model_free(struct TpmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TPM_H */
