#ifndef SARQSM_H
#define SARQSM_H

#include <stdbool.h>
#include <stddef.h>

typedef enum SarqsmStatus {
  SARQSM_STATUS_OK = 0,
  SARQSM_STATUS_NULL_ARGUMENT = 1,
  SARQSM_STATUS_INVALID_INPUT = 2,
  SARQSM_STATUS_NUMERIC = 3,
  SARQSM_STATUS_BUFFER_TOO_SMALL = 4,
  SARQSM_STATUS_UNAVAILABLE = 5,
  SARQSM_STATUS_PANIC = 6,
} SarqsmStatus;

typedef enum SarqsmMethod {
  SARQSM_METHOD_QSM = 0,
  SARQSM_METHOD_QSM_IMPROVED = 1,
  SARQSM_METHOD_QMLE = 2,
} SarqsmMethod;

/**
 * Response, covariates and weights of one network.
 */
typedef struct SarqsmData SarqsmData;

/**
 * Estimates (λ, β, σ²) and, when requested, standard errors.
 */
typedef struct SarqsmFit SarqsmFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a data handle.
 *
 * `x` holds the n×p covariates in column-major order. Edge k runs from `from[k]` to `to[k]`
 * (0-based) with weight `weights[k]`, or 1 when `weights` is null. Self-loops are rejected.
 * With `row_normalize`, rows of W are scaled to sum to one and empty rows stay zero.
 *
 * # Safety
 * `y` must be valid for n reads, `x` for n·p, `from`, `to` and non-null `weights` for
 * `n_edges`; `out` must be writable.
 */
enum SarqsmStatus sarqsm_data_new(size_t n,
                                  size_t p,
                                  const double *y,
                                  const double *x,
                                  size_t n_edges,
                                  const size_t *from,
                                  const size_t *to,
                                  const double *weights,
                                  bool row_normalize,
                                  struct SarqsmData **out);

/**
 * # Safety
 * `data` must be null or a handle from `sarqsm_data_new` not yet freed.
 */
void sarqsm_data_free(struct SarqsmData *data);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t sarqsm_data_n(const struct SarqsmData *data);

/**
 * D_n^c(λ), the concentrated quasi-score matching objective.
 *
 * # Safety
 * `data` must be a live handle and `out` writable.
 */
enum SarqsmStatus sarqsm_concentrated_objective(const struct SarqsmData *data,
                                                double lambda,
                                                double *out);

/**
 * Fits one estimator. The improved estimator runs QSM first for λ̂.
 *
 * # Safety
 * `data` must be a live handle and `out` writable.
 */
enum SarqsmStatus sarqsm_fit(const struct SarqsmData *data,
                             enum SarqsmMethod method,
                             bool inference,
                             struct SarqsmFit **out);

/**
 * # Safety
 * `fit` must be null or a handle from `sarqsm_fit` not yet freed.
 */
void sarqsm_fit_free(struct SarqsmFit *fit);

/**
 * Length of the parameter vector (λ, β₁..β_p, σ²), or 0 for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t sarqsm_fit_dim(const struct SarqsmFit *fit);

/**
 * Writes (λ, β₁..β_p, σ²) into `out`.
 *
 * # Safety
 * `fit` must be a live handle and `out` valid for `len` writes.
 */
enum SarqsmStatus sarqsm_fit_theta(const struct SarqsmFit *fit, double *out, size_t len);

/**
 * Writes standard errors in the order of `sarqsm_fit_theta`. Unavailable without inference.
 *
 * # Safety
 * `fit` must be a live handle and `out` valid for `len` writes.
 */
enum SarqsmStatus sarqsm_fit_std_errors(const struct SarqsmFit *fit, double *out, size_t len);

/**
 * Bytes in the last error message of this thread, excluding the NUL; 0 when none.
 */
size_t sarqsm_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated and truncated to `len - 1` bytes.
 * Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t sarqsm_last_error_message(char *buf, size_t len);

/**
 * Static NUL-terminated version string.
 */
const char *sarqsm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SARQSM_H */
