#ifndef DEPICT_H
#define DEPICT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum DepictStatus {
  DEPICT_STATUS_OK = 0,
  DEPICT_STATUS_NULL_POINTER = 1,
  DEPICT_STATUS_INVALID_ARGUMENT = 2,
  DEPICT_STATUS_SHAPE_MISMATCH = 3,
  DEPICT_STATUS_IO = 4,
  DEPICT_STATUS_FORMAT = 5,
  DEPICT_STATUS_NUMERICAL = 6,
  DEPICT_STATUS_CHECKS_FAILED = 7,
  DEPICT_STATUS_PANIC = 8,
} DepictStatus;

// Loaded checkpoint.
typedef struct DepictModel DepictModel;

// Shape summary of a loaded model.
typedef struct DepictModelInfo {
  // 0 for the self-attention variant, 1 for the cross-attention variant.
  uint32_t variant;
  uint32_t dim;
  uint32_t num_classes;
  uint32_t sa_layers;
  uint32_t ca_layers;
  uint32_t heads;
  uint32_t head_dim;
  // 0 for the full step, 1 for the simplified step.
  uint32_t step_form;
  double epsilon;
} DepictModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *depict_last_error(void);

// Library version as a static NUL-terminated string.
const char *depict_version(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable. On success `*out` owns a
// handle to release with [`depict_model_free`].
enum DepictStatus depict_model_load(const char *path, struct DepictModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from [`depict_model_load`] and not be used afterwards.
void depict_model_free(struct DepictModel *model);

// # Safety
// `model` must be a live handle and `info` writable.
enum DepictStatus depict_model_info(const struct DepictModel *model, struct DepictModelInfo *info);

// Segments `n` patch embeddings (`dim x n`, column-major).
//
// # Safety
// `embeddings` must hold `dim * n` doubles and `labels` room for `n` values; `logits`, when not
// null, must have room for `num_classes * n` doubles and receives the column-major mask logits.
enum DepictStatus depict_model_segment(const struct DepictModel *model,
                                       const double *embeddings,
                                       size_t dim,
                                       size_t n,
                                       uint32_t *labels,
                                       double *logits);

// `½ log det(I + dim/(n ε²) Z Zᵀ)`.
//
// # Safety
// `z` must hold `dim * n` doubles; `out` must be writable.
enum DepictStatus depict_coding_rate(const double *z,
                                     size_t dim,
                                     size_t n,
                                     double epsilon,
                                     double *out);

// Rate of `Pᵀ Z` with scale `m/(n ε²)` for a `dim x m` basis `P`. `orthonormal` (nullable)
// receives 1 when `P` has orthonormal columns.
//
// # Safety
// `z` must hold `dim * n` doubles, `basis` `dim * m` doubles; `out` must be writable.
enum DepictStatus depict_projected_rate(const double *z,
                                        size_t dim,
                                        size_t n,
                                        const double *basis,
                                        size_t m,
                                        double epsilon,
                                        double *out,
                                        int32_t *orthonormal);

// Runs every verification check with default trial counts. `json` (nullable) receives the
// full report, to release with [`depict_string_free`]. Returns
// [`DepictStatus::ChecksFailed`] when a hard check fails; the report is still produced.
//
// # Safety
// `json`, when not null, must be writable.
enum DepictStatus depict_verify_run_all(uint64_t seed, char **json);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void depict_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPICT_H */
