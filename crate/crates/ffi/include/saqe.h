#ifndef SAQE_H
#define SAQE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Codes 2 to 4 match the command-line exit
 * codes.
 */
typedef enum SaqeStatus {
  SAQE_STATUS_OK = 0,
  /**
   * A panic inside the library.
   */
  SAQE_STATUS_INTERNAL = 1,
  SAQE_STATUS_CONFIG = 2,
  SAQE_STATUS_NON_CONVERGENCE = 3,
  SAQE_STATUS_VALIDATION = 4,
  SAQE_STATUS_NULL_POINTER = 5,
  /**
   * The output buffer is smaller than the number of values to write.
   */
  SAQE_STATUS_BUFFER_TOO_SMALL = 6,
} SaqeStatus;

/**
 * Census frame.
 */
typedef struct SaqeCensus SaqeCensus;

/**
 * Fitted density ratio model.
 */
typedef struct SaqeDrmFit SaqeDrmFit;

/**
 * Fitted nested-error regression model.
 */
typedef struct SaqeNerFit SaqeNerFit;

/**
 * Survey sample.
 */
typedef struct SaqeSample SaqeSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *saqe_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into the library from the same thread.
 */
const char *saqe_last_error(void);

/**
 * Builds a survey sample from unit-level arrays.
 *
 * `area_codes` has `n_units` entries; the decimal code becomes the area id.
 * `x` is row-major `n_units x d`.
 *
 * # Safety
 * Every pointer must be valid for the stated number of elements.
 */
enum SaqeStatus saqe_sample_new(uintptr_t n_units,
                                uintptr_t d,
                                const int64_t *area_codes,
                                const double *x,
                                const double *y,
                                struct SaqeSample **out);

/**
 * Loads a survey CSV. `x_cols` is a comma-separated column list.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SaqeStatus saqe_sample_load_csv(const char *path,
                                     const char *area_col,
                                     const char *y_col,
                                     const char *x_cols,
                                     struct SaqeSample **out);

/**
 * Number of areas, or 0 for a NULL handle.
 *
 * # Safety
 * `sample` must be NULL or a live handle.
 */
uintptr_t saqe_sample_num_areas(const struct SaqeSample *sample);

/**
 * # Safety
 * `sample` must be NULL or a handle not yet freed.
 */
void saqe_sample_free(struct SaqeSample *sample);

/**
 * Builds a unit-level census.
 *
 * `sample_rank` is optional (NULL when unknown). Otherwise entry `i` is -1
 * for an unsampled unit, or the unit's position among its area's rows of
 * the survey sample.
 *
 * # Safety
 * Every non-NULL pointer must be valid for the stated number of elements.
 */
enum SaqeStatus saqe_census_new(uintptr_t n_units,
                                uintptr_t d,
                                const int64_t *area_codes,
                                const double *x,
                                const int64_t *sample_rank,
                                struct SaqeCensus **out);

/**
 * Loads a census CSV. `sampled_col` may be NULL.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SaqeStatus saqe_census_load_csv(const char *path,
                                     const char *area_col,
                                     const char *x_cols,
                                     const char *sampled_col,
                                     struct SaqeCensus **out);

/**
 * # Safety
 * `census` must be NULL or a handle not yet freed.
 */
void saqe_census_free(struct SaqeCensus *census);

/**
 * Maximum-likelihood NER fit. `census` may be NULL, in which case the EBLUP
 * falls back to sample covariate means.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SaqeStatus saqe_fit_ner(const struct SaqeSample *sample,
                             const struct SaqeCensus *census,
                             struct SaqeNerFit **out);

/**
 * Writes the area and unit variance components.
 *
 * # Safety
 * `fit` must be live; the output pointers must be writable.
 */
enum SaqeStatus saqe_ner_variances(const struct SaqeNerFit *fit,
                                   double *sigma_v2,
                                   double *sigma_e2);

/**
 * Copies the regression coefficients (intercept first) into `out` and
 * writes their count to `len`. Call with `cap = 0` to query the count.
 *
 * # Safety
 * `fit` must be live; `out` must hold `cap` values; `len` must be writable.
 */
enum SaqeStatus saqe_ner_beta(const struct SaqeNerFit *fit,
                              double *out,
                              uintptr_t cap,
                              uintptr_t *len);

/**
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void saqe_ner_free(struct SaqeNerFit *fit);

/**
 * Density ratio model fit with the default basis and baseline.
 *
 * # Safety
 * `sample` must be live; `out` must be writable.
 */
enum SaqeStatus saqe_fit_drm(const struct SaqeSample *sample, struct SaqeDrmFit **out);

/**
 * Largest deviation of a fitted area distribution's total mass from one,
 * or NaN for a NULL handle.
 *
 * # Safety
 * `fit` must be NULL or live.
 */
double saqe_drm_max_constraint_violation(const struct SaqeDrmFit *fit);

/**
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void saqe_drm_free(struct SaqeDrmFit *fit);

/**
 * Predicts area quantiles with one method (`"dir"`, `"ner"`, `"el"`,
 * `"ebel2"`, ...). Writes `num_areas x n_alphas` values row-major in sample
 * area order.
 *
 * # Safety
 * `sample` must be live, `census` NULL or live, `alphas` valid for
 * `n_alphas` values and `out` for `cap` values.
 */
enum SaqeStatus saqe_predict(const struct SaqeSample *sample,
                             const struct SaqeCensus *census,
                             const char *method,
                             const double *alphas,
                             uintptr_t n_alphas,
                             uint64_t seed,
                             double *out,
                             uintptr_t cap);

/**
 * Parametric bootstrap MSE of one method with its natural bootstrap
 * variant. Writes `num_areas x n_alphas` values row-major.
 *
 * # Safety
 * As for [`saqe_predict`].
 */
enum SaqeStatus saqe_bootstrap_mse(const struct SaqeSample *sample,
                                   const struct SaqeCensus *census,
                                   const char *method,
                                   const double *alphas,
                                   uintptr_t n_alphas,
                                   uintptr_t replicates,
                                   uint64_t seed,
                                   double *out,
                                   uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAQE_H */
