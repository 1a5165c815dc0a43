#ifndef CHIVAR_H
#define CHIVAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible entry point.
 */
typedef enum ChivarStatus {
  CHIVAR_STATUS_OK = 0,
  CHIVAR_STATUS_NULL_POINTER = 1,
  CHIVAR_STATUS_INVALID_ARGUMENT = 2,
  CHIVAR_STATUS_CONFIG = 3,
  CHIVAR_STATUS_UNSUPPORTED = 4,
  CHIVAR_STATUS_DEGENERATE = 5,
  CHIVAR_STATUS_IO = 6,
  CHIVAR_STATUS_PARSE = 7,
  CHIVAR_STATUS_PANIC = 8,
} ChivarStatus;

/**
 * A solved PDE chain.
 */
typedef struct ChivarChain ChivarChain;

/**
 * A covariation curve `t ↦ [X, Y]^ε_t` on the grid nodes.
 */
typedef struct ChivarCurve ChivarCurve;

/**
 * A sampled path on a uniform grid.
 */
typedef struct ChivarPath ChivarPath;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next call
 * into this library from the same thread.
 */
const char *chivar_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *chivar_version(void);

/**
 * Copies `len` samples (one per grid node, `len = steps + 1`) into a new path.
 */
enum ChivarStatus chivar_path_new(double horizon,
                                  size_t steps,
                                  const double *values,
                                  size_t len,
                                  struct ChivarPath **out);

/**
 * Standard Brownian path number `index` of the stream `seed`.
 */
enum ChivarStatus chivar_path_brownian(double horizon,
                                       size_t steps,
                                       uint64_t seed,
                                       uint64_t index,
                                       struct ChivarPath **out);

/**
 * Number of samples, or 0 for a null handle.
 */
size_t chivar_path_len(const struct ChivarPath *path);

/**
 * Copies up to `cap` samples into `buf`; `written` receives the count.
 */
enum ChivarStatus chivar_path_values(const struct ChivarPath *path,
                                     double *buf,
                                     size_t cap,
                                     size_t *written);

void chivar_path_free(struct ChivarPath *path);

/**
 * `[X, Y]^ε` on the common grid of `x` and `y`.
 */
enum ChivarStatus chivar_epsilon_covariation(const struct ChivarPath *x,
                                             const struct ChivarPath *y,
                                             double epsilon,
                                             struct ChivarCurve **out);

size_t chivar_curve_len(const struct ChivarCurve *curve);

enum ChivarStatus chivar_curve_values(const struct ChivarCurve *curve,
                                      double *buf,
                                      size_t cap,
                                      size_t *written);

/**
 * Value at the horizon.
 */
enum ChivarStatus chivar_curve_last(const struct ChivarCurve *curve, double *value);

void chivar_curve_free(struct ChivarCurve *curve);

/**
 * Zero-rate Black–Scholes call price.
 */
double chivar_black_scholes_call(double spot, double strike, double sigma, double maturity);

/**
 * Solves a PDE chain described by JSON with keys `map`, `model`, `anchors`
 * and `settings`.
 */
enum ChivarStatus chivar_chain_solve_json(const char *request, struct ChivarChain **out);

/**
 * `ν(params; t, y)` on the interval containing `t`; `params` holds the
 * path values at the anchors before `t`. `clamped` may be null.
 */
enum ChivarStatus chivar_chain_value(const struct ChivarChain *chain,
                                     const double *params,
                                     size_t n_params,
                                     double t,
                                     double y,
                                     double *value,
                                     bool *clamped);

/**
 * `∂_y ν(params; t, y)`, the hedge ratio.
 */
enum ChivarStatus chivar_chain_gradient(const struct ChivarChain *chain,
                                        const double *params,
                                        size_t n_params,
                                        double t,
                                        double y,
                                        double *value,
                                        bool *clamped);

/**
 * Writes `chain.json` and one CSV per interval into `dir`.
 */
enum ChivarStatus chivar_chain_save(const struct ChivarChain *chain, const char *dir);

void chivar_chain_free(struct ChivarChain *chain);

/**
 * Runs an experiment config given as JSON text into `out_dir`. `threads`
 * of 0 uses the default pool. `passed` (may be null) receives whether every
 * numeric check passed.
 */
enum ChivarStatus chivar_run_experiment_json(const char *config,
                                             const char *out_dir,
                                             size_t threads,
                                             bool *passed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CHIVAR_H */
