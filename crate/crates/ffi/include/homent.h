#ifndef HOMENT_H
#define HOMENT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  HOMENT_STATUS_OK = 0,
  HOMENT_STATUS_NULL_POINTER = 1,
  HOMENT_STATUS_INVALID_ARGUMENT = 2,
  HOMENT_STATUS_DIMENSION_MISMATCH = 3,
  HOMENT_STATUS_BUFFER_TOO_SMALL = 4,
  HOMENT_STATUS_SINGULAR = 5,
  HOMENT_STATUS_UNIDENTIFIED = 6,
  HOMENT_STATUS_UNAVAILABLE = 7,
  HOMENT_STATUS_IO = 8,
  HOMENT_STATUS_PANIC = 9,
} HomentStatus;

/**
 * Estimation result together with the moment system it used.
 */
typedef struct HomentEstimate HomentEstimate;

/**
 * Reduced-form shock panel.
 */
typedef struct HomentPanel HomentPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *homent_last_error(void);

void homent_clear_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *homent_version(void);

/**
 * Number of moment conditions for `n` shocks and the given orders
 * (`n_orders == 0` selects orders 2, 3 and 4).
 *
 * # Safety
 * `orders` must point to `n_orders` values; `out` must be writable.
 */
HomentStatus homent_moment_condition_count(size_t n,
                                           const uint32_t *orders,
                                           size_t n_orders,
                                           size_t *out);

/**
 * Copies a row-major `t x n` array into a new panel.
 *
 * # Safety
 * `data` must point to `t * n` doubles; `out` must be writable.
 */
HomentStatus homent_panel_new(const double *data, size_t t, size_t n, HomentPanel **out);

/**
 * # Safety
 * `panel` must come from [`homent_panel_new`] and not be used afterwards.
 */
void homent_panel_free(HomentPanel *panel);

/**
 * Estimates `B` with the named estimator (`"csue2"`, `"gmm2"`, ...).
 * `shocks_json` is a JSON distribution, or an array of them, and may be
 * NULL unless the estimator needs the true distributions.
 *
 * # Safety
 * Pointers must be valid as described; `out` must be writable.
 */
HomentStatus homent_estimate(const HomentPanel *panel,
                             const char *estimator,
                             const uint32_t *orders,
                             size_t n_orders,
                             const char *shocks_json,
                             HomentEstimate **out);

/**
 * # Safety
 * `est` must come from [`homent_estimate`] and not be used afterwards.
 */
void homent_estimate_free(HomentEstimate *est);

/**
 * Dimension `n` of the estimate.
 *
 * # Safety
 * `est` must be a live handle and `out` writable.
 */
HomentStatus homent_estimate_dim(const HomentEstimate *est, size_t *out);

/**
 * Writes the normalized `n x n` estimate, row-major.
 *
 * # Safety
 * `est` must be a live handle; `out` must hold `len` doubles.
 */
HomentStatus homent_estimate_b(const HomentEstimate *est, double *out, size_t len);

/**
 * Writes the `n^2 x n^2` asymptotic covariance of `vec(B)` (column-major
 * `vec`), row-major. Returns `UNAVAILABLE` when `G` is rank deficient.
 *
 * # Safety
 * `est` must be a live handle; `out` must hold `len` doubles.
 */
HomentStatus homent_estimate_avar(const HomentEstimate *est, double *out, size_t len);

/**
 * Loss at the optimum, convergence flag (0/1), and iteration count; any
 * output pointer may be NULL.
 *
 * # Safety
 * `est` must be a live handle; non-NULL outputs must be writable.
 */
HomentStatus homent_estimate_diagnostics(const HomentEstimate *est,
                                         double *loss,
                                         int32_t *converged,
                                         size_t *iterations);

/**
 * Sample variances of the innovations `B_hat^-1 u_t`.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` doubles.
 */
HomentStatus homent_estimate_innovation_variances(const HomentEstimate *est,
                                                  const HomentPanel *panel,
                                                  double *out,
                                                  size_t len);

/**
 * Standardized raw moments `E[e^r]`, `r = 0..=max_order`, of a JSON distribution.
 *
 * # Safety
 * `spec_json` must be NUL-terminated; `out` must hold `len` doubles.
 */
HomentStatus homent_population_moments(const char *spec_json,
                                       size_t max_order,
                                       double *out,
                                       size_t len);

/**
 * Runs (or resumes) a scenario file into `out_dir`; `threads == 0` uses every core.
 *
 * # Safety
 * Both strings must be NUL-terminated.
 */
HomentStatus homent_run_scenario(const char *path, const char *out_dir, size_t threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOMENT_H */
