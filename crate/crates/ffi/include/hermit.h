#ifndef HERMIT_H
#define HERMIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Family codes accepted by [`hermit_dataset_new`] (as `uint32_t`).
 */
typedef enum HermitFamily {
  HERMIT_FAMILY_GAUSSIAN = 0,
  HERMIT_FAMILY_BERNOULLI = 1,
  HERMIT_FAMILY_POISSON = 2,
} HermitFamily;

/**
 * Penalty codes accepted by [`hermit_fit`] (as `uint32_t`).
 */
typedef enum HermitPenalty {
  /**
   * Entrywise lasso on every coefficient.
   */
  HERMIT_PENALTY_LASSO = 0,
  /**
   * One group per feature row of each component.
   */
  HERMIT_PENALTY_GROUP = 1,
} HermitPenalty;

/**
 * Result code of every fallible call.
 */
typedef enum HermitStatus {
  HERMIT_STATUS_OK = 0,
  HERMIT_STATUS_NULL_POINTER = 1,
  HERMIT_STATUS_INVALID_ARGUMENT = 2,
  HERMIT_STATUS_DIMENSION_MISMATCH = 3,
  HERMIT_STATUS_INVALID_DATA = 4,
  HERMIT_STATUS_NON_FINITE = 5,
  HERMIT_STATUS_UNSUPPORTED = 6,
  HERMIT_STATUS_IO = 7,
  HERMIT_STATUS_PANIC = 8,
} HermitStatus;

/**
 * Opaque dataset handle.
 */
typedef struct HermitDataset HermitDataset;

/**
 * Opaque fitted-model handle.
 */
typedef struct HermitModel HermitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a
 * successful call. Valid until the next call on the same thread.
 */
const char *hermit_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hermit_version(void);

/**
 * Build a dataset from row-major features `x` (n by d) and targets `y`
 * (n by m, NaN marks a missing entry) with one family code per task.
 *
 * # Safety
 * `x`, `y` and `families` must point to at least n*d, n*m and m readable
 * values; `out` must be writable.
 */
enum HermitStatus hermit_dataset_new(const double *x,
                                     const double *y,
                                     size_t n,
                                     size_t d,
                                     size_t m,
                                     const uint32_t *families,
                                     struct HermitDataset **out);

/**
 * Load a dataset CSV plus its JSON task description.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum HermitStatus hermit_dataset_load(const char *csv_path,
                                      const char *tasks_path,
                                      struct HermitDataset **out);

/**
 * Write n, d and m of a dataset. Null outputs are skipped.
 *
 * # Safety
 * `data` must be a live handle.
 */
enum HermitStatus hermit_dataset_dims(const struct HermitDataset *data,
                                      size_t *n,
                                      size_t *d,
                                      size_t *m);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void hermit_dataset_free(struct HermitDataset *data);

/**
 * Fit a k-component model. `t_out` of zero uses the default iteration cap.
 * The final penalized objective is written to `objective` when non-null.
 *
 * # Safety
 * `data` must be a live handle; `out` must be writable.
 */
enum HermitStatus hermit_fit(const struct HermitDataset *data,
                             size_t k,
                             uint32_t penalty,
                             double lambda,
                             double gamma,
                             size_t t_out,
                             uint64_t seed,
                             struct HermitModel **out,
                             double *objective);

/**
 * Write d, m and k of a model. Null outputs are skipped.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum HermitStatus hermit_model_dims(const struct HermitModel *model,
                                    size_t *d,
                                    size_t *m,
                                    size_t *k);

/**
 * Copy coefficients into `out` laid out as `[feature][task][component]`;
 * `len` must equal d*m*k.
 *
 * # Safety
 * `out` must point to `len` writable values.
 */
enum HermitStatus hermit_model_beta(const struct HermitModel *model, double *out, size_t len);

/**
 * Copy the k mixture weights into `out`.
 *
 * # Safety
 * `out` must point to `len` writable values.
 */
enum HermitStatus hermit_model_weights(const struct HermitModel *model, double *out, size_t len);

/**
 * Feature-only prediction: n by m mixture means for row-major features
 * `x` (n by d).
 *
 * # Safety
 * `x` must hold n*d values and `out` n*m writable values.
 */
enum HermitStatus hermit_predict(const struct HermitModel *model,
                                 const double *x,
                                 size_t n,
                                 size_t d,
                                 double *out,
                                 size_t out_len);

/**
 * Impute every target of `data` (n by m) from the observed ones.
 * Observed entries receive model predictions as well.
 *
 * # Safety
 * Handles must be live; `out` must hold n*m writable values.
 */
enum HermitStatus hermit_impute(const struct HermitModel *model,
                                const struct HermitDataset *data,
                                double *out,
                                size_t out_len);

/**
 * Posterior component probabilities (n by k) given the observed targets.
 *
 * # Safety
 * Handles must be live; `out` must hold n*k writable values.
 */
enum HermitStatus hermit_responsibilities(const struct HermitModel *model,
                                          const struct HermitDataset *data,
                                          double *out,
                                          size_t out_len);

/**
 * Save a model as JSON.
 *
 * # Safety
 * `model` must be live and `file` a NUL-terminated string.
 */
enum HermitStatus hermit_model_save(const struct HermitModel *model, const char *file);

/**
 * Load a model saved by [`hermit_model_save`] or the command-line tool.
 * Gated models are rejected.
 *
 * # Safety
 * `file` must be a NUL-terminated string; `out` must be writable.
 */
enum HermitStatus hermit_model_load(const char *file, struct HermitModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void hermit_model_free(struct HermitModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HERMIT_H */
