#ifndef ANISO_EXTREMAL_H
#define ANISO_EXTREMAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AeStatus {
  AE_STATUS_OK = 0,
  AE_STATUS_NULL_POINTER = 1,
  AE_STATUS_INVALID_UTF8 = 2,
  AE_STATUS_CONFIG = 3,
  AE_STATUS_EXPONENTS = 4,
  AE_STATUS_NUMERICAL = 5,
  AE_STATUS_BUFFER_TOO_SMALL = 6,
  AE_STATUS_PANIC = 7,
} AeStatus;

/**
 * Parsed run configuration.
 */
typedef struct AeConfig AeConfig;

/**
 * Outcome of one solve.
 */
typedef struct AeResult AeResult;

/**
 * Scalar outputs of a solve.
 */
typedef struct AeSummary {
  double k_eps;
  double l_eps;
  double residual;
  size_t iters;
  bool converged;
} AeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t ae_last_error(char *buf, size_t len);

/**
 * Parses a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum AeStatus ae_config_parse(const char *toml, struct AeConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from `ae_config_parse` not yet freed.
 */
void ae_config_free(struct AeConfig *cfg);

/**
 * Minimizes at the configured `solve.eps` from the default initial guess.
 * A solve that stops without converging still returns `AE_STATUS_OK`;
 * check `converged` in `ae_result_summary`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be valid for writes.
 */
enum AeStatus ae_solve(const struct AeConfig *cfg, struct AeResult **out);

/**
 * # Safety
 * `res` must be null or a handle from `ae_solve` not yet freed.
 */
void ae_result_free(struct AeResult *res);

/**
 * # Safety
 * `res` must be a live handle; `out` must be valid for writes.
 */
enum AeStatus ae_result_summary(const struct AeResult *res, struct AeSummary *out);

/**
 * Number of grid nodes; with `counts` non-null, also writes the node count
 * per stored axis (`dim` entries, at most `counts_len`).
 *
 * # Safety
 * `res` must be a live handle; `nodes` valid for writes; `counts` null or
 * valid for `counts_len` entries.
 */
enum AeStatus ae_result_shape(const struct AeResult *res,
                              size_t *nodes,
                              size_t *counts,
                              size_t counts_len);

/**
 * Copies the extremal's nodal values, last stored axis fastest.
 *
 * # Safety
 * `res` must be a live handle; `buf` valid for `len` doubles.
 */
enum AeStatus ae_result_values(const struct AeResult *res, double *buf, size_t len);

/**
 * Critical exponent `p*` for exponents given in any axis order.
 *
 * # Safety
 * `p` must be valid for `n` doubles; `out` valid for writes.
 */
enum AeStatus ae_critical_exponent(const double *p, size_t n, double *out);

/**
 * `p*_eps` and `lambda_eps` at level `eps`.
 *
 * # Safety
 * `p` must be valid for `n` doubles; the outputs valid for writes.
 */
enum AeStatus ae_epsilon_exponents(const double *p,
                                   size_t n,
                                   double eps,
                                   double *p_star_eps,
                                   double *lambda_eps);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ae_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANISO_EXTREMAL_H */
