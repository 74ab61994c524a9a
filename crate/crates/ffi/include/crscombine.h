#ifndef CRSCOMBINE_H
#define CRSCOMBINE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every function.
 */
typedef enum CrsStatus {
  CRS_STATUS_OK = 0,
  CRS_STATUS_NULL_POINTER = 1,
  CRS_STATUS_INVALID_ARGUMENT = 2,
  CRS_STATUS_IO = 3,
  CRS_STATUS_PARSE = 4,
  CRS_STATUS_IDENTIFICATION = 5,
  CRS_STATUS_BOUND = 6,
  CRS_STATUS_INFEASIBLE = 7,
  CRS_STATUS_ESTIMATION = 8,
  CRS_STATUS_PANIC = 99,
} CrsStatus;

/**
 * A loaded panel data set.
 */
typedef struct CrsPanel CrsPanel;

/**
 * Outcome of one test.
 */
typedef struct CrsTestResult {
  double statistic;
  double critical_value;
  /**
   * 1 when the null is rejected, 0 otherwise.
   */
  int32_t reject;
  /**
   * Number of top randomization values the statistic may occupy.
   */
  size_t k;
  /**
   * Number of groups.
   */
  size_t q;
} CrsTestResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *crs_last_error(void);

/**
 * Library version as a static string.
 */
const char *crs_version(void);

/**
 * Loads a CSV panel.
 *
 * `time_col` may be null when the file has no time column.
 * `covariates` is a comma-separated list of column names.
 *
 * # Safety
 * String arguments must be nul-terminated; id arrays must hold the given
 * number of elements; `out` must be writable.
 */
enum CrsStatus crs_panel_load(const char *path,
                              const char *cluster_col,
                              const char *time_col,
                              const char *outcome,
                              const char *covariates,
                              const int64_t *controls,
                              size_t n_controls,
                              const int64_t *treated,
                              size_t n_treated,
                              struct CrsPanel **out);

/**
 * Releases a panel. Null is ignored.
 *
 * # Safety
 * `panel` must come from [`crs_panel_load`] and not be used afterwards.
 */
void crs_panel_free(struct CrsPanel *panel);

/**
 * Number of rows and of clusters of a panel.
 *
 * # Safety
 * `panel` must be a live panel; out-pointers must be writable.
 */
enum CrsStatus crs_panel_shape(const struct CrsPanel *panel, size_t *n_rows, size_t *n_clusters);

/**
 * Runs the randomization test of c'beta = lambda at level alpha for a
 * grouping literal such as `1:4,2:5,3:6`.
 *
 * # Safety
 * `panel` must be a live panel; strings nul-terminated; `c` must hold
 * `c_len` values; `out` must be writable.
 */
enum CrsStatus crs_run_test(const struct CrsPanel *panel,
                            const char *formula,
                            const char *grouping,
                            const double *c,
                            size_t c_len,
                            double lambda,
                            double alpha,
                            struct CrsTestResult *out);

/**
 * Closed-form local power when the rejection budget is one.
 *
 * # Safety
 * `xi` and `sigma` must hold `q` values; `out` must be writable.
 */
enum CrsStatus crs_power_k1(const double *xi,
                            const double *sigma,
                            size_t q,
                            double delta,
                            double *out);

/**
 * Simulated local power at level alpha with its standard error.
 *
 * # Safety
 * `xi` and `sigma` must hold `q` values; out-pointers must be writable.
 */
enum CrsStatus crs_power_mc(const double *xi,
                            const double *sigma,
                            size_t q,
                            double delta,
                            double alpha,
                            uint64_t reps,
                            uint64_t seed,
                            double *out_value,
                            double *out_se);

/**
 * Power-maximizing pairing for a row-major n x n matrix of
 * Psi = Phi(-xi delta / sigma) values. Writes the column of each row to
 * `out_assignment` (n entries) and the attained power to `out_power`.
 * `intervals` = 0 selects the default.
 *
 * # Safety
 * `psi` must hold n*n values; `out_assignment` n writable entries.
 */
enum CrsStatus crs_combine_k1(const double *psi,
                              size_t n,
                              double delta,
                              size_t intervals,
                              size_t *out_assignment,
                              double *out_power);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRSCOMBINE_H */
