#ifndef OPTISTAT_H
#define OPTISTAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OptistatStatus {
  OPTISTAT_STATUS_OK = 0,
  OPTISTAT_STATUS_NULL_POINTER = 1,
  OPTISTAT_STATUS_INVALID_ARGUMENT = 2,
  OPTISTAT_STATUS_DIMENSION_MISMATCH = 3,
  OPTISTAT_STATUS_NOT_POSITIVE_DEFINITE = 4,
  OPTISTAT_STATUS_NOT_ADMISSIBLE = 5,
  OPTISTAT_STATUS_SINGULAR = 6,
  OPTISTAT_STATUS_NO_CONVERGENCE = 7,
  OPTISTAT_STATUS_NUMERICAL_FAILURE = 8,
  OPTISTAT_STATUS_IO = 9,
  OPTISTAT_STATUS_PANIC = 10,
} OptistatStatus;

typedef enum OptistatEvaluationMode {
  OPTISTAT_EVALUATION_MODE_ODE = 0,
  OPTISTAT_EVALUATION_MODE_EQUILIBRIUM = 1,
} OptistatEvaluationMode;

/**
 * Opaque data matrices `(ψ, ζ, ξ)` collected from one rollout.
 */
typedef struct OptistatData OptistatData;

/**
 * Opaque system model `(A, B, D, F, C)`.
 */
typedef struct OptistatModel OptistatModel;

/**
 * Opaque cost weights `(Q, R)`.
 */
typedef struct OptistatWeights OptistatWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *optistat_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * nul-terminated) and returns its full length in bytes, or 0 if there is none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t optistat_last_error(char *buf, size_t len);

/**
 * Builds a model. `d` holds `q1` consecutive n×n blocks, `f` holds `q2`
 * consecutive n×m blocks, and `c` is n×p.
 *
 * # Safety
 * Every array must hold the number of doubles its dimensions imply and
 * `out` must be a valid pointer.
 */
enum OptistatStatus optistat_model_new(size_t n,
                                       size_t m,
                                       const double *a,
                                       const double *b,
                                       size_t q1,
                                       const double *d,
                                       size_t q2,
                                       const double *f,
                                       size_t p,
                                       const double *c,
                                       struct OptistatModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`optistat_model_new`] not yet freed.
 */
void optistat_model_free(struct OptistatModel *model);

/**
 * # Safety
 * `q` is n×n, `r` is m×m, `out` must be valid.
 */
enum OptistatStatus optistat_weights_new(size_t n,
                                         size_t m,
                                         const double *q,
                                         const double *r,
                                         struct OptistatWeights **out);

/**
 * # Safety
 * `weights` must be null or a live handle.
 */
void optistat_weights_free(struct OptistatWeights *weights);

/**
 * Mean-square admissibility of the m×n gain `k`.
 *
 * # Safety
 * Pointers must be valid; `k` holds m·n doubles.
 */
enum OptistatStatus optistat_is_admissible(const struct OptistatModel *model,
                                           const double *k,
                                           bool *out_admissible,
                                           double *out_abscissa);

/**
 * Value matrix (n×n, written to `out_p`) and stationary cost of gain `k`.
 *
 * # Safety
 * Pointers must be valid; `out_p` holds n·n doubles.
 */
enum OptistatStatus optistat_policy_cost(const struct OptistatModel *model,
                                         const struct OptistatWeights *weights,
                                         const double *k,
                                         double *out_p,
                                         double *out_cost);

/**
 * Model-based policy iteration from the admissible gain `k1`. Writes the
 * final value matrix (n×n) and its greedy gain (m×n).
 *
 * # Safety
 * Pointers must be valid; output arrays sized as stated.
 */
enum OptistatStatus optistat_standard_pi(const struct OptistatModel *model,
                                         const struct OptistatWeights *weights,
                                         const double *k1,
                                         size_t max_iter,
                                         double tol,
                                         double *out_p,
                                         double *out_k,
                                         size_t *out_iterations);

/**
 * Stabilizing solution of the generalized Riccati equation (n×n).
 *
 * # Safety
 * Pointers must be valid; `out_p` holds n·n doubles.
 */
enum OptistatStatus optistat_riccati_oracle(const struct OptistatModel *model,
                                            const struct OptistatWeights *weights,
                                            double tol,
                                            double *out_p);

/**
 * Simulates one exploratory rollout under `k1` and accumulates its data
 * matrices.
 *
 * # Safety
 * Pointers must be valid; `k1` holds m·n doubles.
 */
enum OptistatStatus optistat_collect_data(const struct OptistatModel *model,
                                          const struct OptistatWeights *weights,
                                          const double *k1,
                                          double t_f,
                                          double dt,
                                          double sigma_u,
                                          uint64_t seed,
                                          double burn_in,
                                          struct OptistatData **out);

/**
 * # Safety
 * `data` and `path` must be valid.
 */
enum OptistatStatus optistat_data_save(const struct OptistatData *data, const char *file);

/**
 * # Safety
 * `path` and `out` must be valid.
 */
enum OptistatStatus optistat_data_load(const char *file, struct OptistatData **out);

/**
 * Condition number of ψ, or NaN for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
double optistat_data_cond_psi(const struct OptistatData *data);

/**
 * # Safety
 * `data` must be null or a live handle.
 */
void optistat_data_free(struct OptistatData *data);

/**
 * Runs OLSbPI from `k1` for `iterations` gains and writes them to
 * `out_gains` as `iterations` consecutive m×n blocks.
 *
 * # Safety
 * Pointers must be valid; `out_gains` holds iterations·m·n doubles.
 */
enum OptistatStatus optistat_olsbpi(const struct OptistatData *data,
                                    const double *k1,
                                    size_t iterations,
                                    double s_f,
                                    enum OptistatEvaluationMode mode,
                                    double *out_gains);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPTISTAT_H */
