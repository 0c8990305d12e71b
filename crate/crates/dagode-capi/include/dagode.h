/* C interface to the dagode causal-structure-discovery toolkit. */

#ifndef DAGODE_H
#define DAGODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
#define DAGODE_OK 0

/**
 * A required pointer argument was null or an index was out of range.
 */
#define DAGODE_ERR_ARGUMENT 1

/**
 * A precondition on the inputs was violated.
 */
#define DAGODE_ERR_CONTRACT 2

/**
 * File, parse, or data-shape failure.
 */
#define DAGODE_ERR_DATA 3

/**
 * Numerical or optimization failure.
 */
#define DAGODE_ERR_NUMERIC 4

/**
 * Opaque dataset handle.
 */
typedef struct DagodeDataset DagodeDataset;

/**
 * Opaque fit-result handle.
 */
typedef struct DagodeFit DagodeFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dagode_last_error_message(void);

/**
 * Toolkit version as a static string.
 */
const char *dagode_version(void);

/**
 * Load a CSV dataset (header row of names, numeric body). Returns null on
 * failure; see dagode_last_error_message.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct DagodeDataset *dagode_dataset_load_csv(const char *path);

/**
 * # Safety
 * `ds` must be a pointer returned by dagode_dataset_load_csv (or null).
 */
void dagode_dataset_free(struct DagodeDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle.
 */
int dagode_dataset_rows(const struct DagodeDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle.
 */
int dagode_dataset_cols(const struct DagodeDataset *ds);

/**
 * Acyclicity functional h(W) = Tr(exp(W o W)) - d for a row-major d x d
 * matrix. h is zero iff the support of W is acyclic.
 *
 * # Safety
 * `w` must point to d*d doubles; `h_out` must be a valid pointer.
 */
int dagode_h_exp(const double *w, int d, double *h_out);

/**
 * Fit the linear NOTEARS learner with default hyperparameters, the given
 * l1 weight, and edge threshold (pass a negative threshold for the
 * default). Returns null on failure.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
struct DagodeFit *dagode_fit_notears(const struct DagodeDataset *ds,
                                     double lambda1,
                                     double threshold,
                                     uint64_t seed);

/**
 * Fit the DAG-ODE/CNF learner with default hyperparameters. Pass a
 * negative threshold to keep the largest-gap rule.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
struct DagodeFit *dagode_fit_dag_ode(const struct DagodeDataset *ds,
                                     double lambda1,
                                     double threshold,
                                     uint64_t seed);

/**
 * # Safety
 * `fit` must be a pointer returned by a dagode_fit_* call (or null).
 */
void dagode_fit_free(struct DagodeFit *fit);

/**
 * Number of edges in the thresholded DAG, or -1 on a null handle.
 *
 * # Safety
 * `fit` must be a live fit handle.
 */
int dagode_fit_edge_count(const struct DagodeFit *fit);

/**
 * Parent/child node indices of edge `i` (in sorted order).
 *
 * # Safety
 * `fit`, `parent`, and `child` must be valid pointers.
 */
int dagode_fit_edge(const struct DagodeFit *fit, int i, int *parent, int *child);

/**
 * Entry [j,k] of the effective adjacency (|W| or J-bar), or NaN on error.
 *
 * # Safety
 * `fit` must be a live fit handle.
 */
double dagode_fit_weight(const struct DagodeFit *fit, int j, int k);

/**
 * Final constraint residual of the fit.
 *
 * # Safety
 * `fit` must be a live fit handle.
 */
double dagode_fit_h_final(const struct DagodeFit *fit);

/**
 * 1 if the augmented-Lagrangian loop reported convergence, 0 if not,
 * -1 on a null handle.
 *
 * # Safety
 * `fit` must be a live fit handle.
 */
int dagode_fit_converged(const struct DagodeFit *fit);

/**
 * SHD and TPR between two edge sets over `d` nodes, each given as a
 * length-2m array of (parent, child) pairs.
 *
 * # Safety
 * `pred`/`truth` must point to 2*pred_m / 2*truth_m ints; `shd_out` and
 * `tpr_out` must be valid pointers.
 */
int dagode_shd(int d,
               const int *pred,
               int pred_m,
               const int *truth,
               int truth_m,
               int *shd_out,
               double *tpr_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAGODE_H */
