#ifndef ISOKANN_H
#define ISOKANN_H

/* Generated by cbindgen from isokann-ffi; edit src/lib.rs, not this file. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum IsoStatus {
  ISO_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ISO_STATUS_NULL_ARG = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ISO_STATUS_INVALID_UTF8 = 2,
  /**
   * Rejected input: unknown potential name, bad configuration, empty batch.
   */
  ISO_STATUS_INVALID_ARGUMENT = 3,
  /**
   * An array length or model dimension does not match the system.
   */
  ISO_STATUS_DIMENSION = 4,
  /**
   * File could not be read or written.
   */
  ISO_STATUS_IO = 5,
  /**
   * Checkpoint bytes are malformed or of an unsupported version.
   */
  ISO_STATUS_CHECKPOINT = 6,
  /**
   * The numerics failed: non-finite values, divergence, degenerate spread.
   */
  ISO_STATUS_NUMERICS = 7,
  /**
   * The iteration budget ran out before the convergence threshold.
   */
  ISO_STATUS_NO_CONVERGENCE = 8,
  /**
   * Internal invariant violation (a bug worth reporting).
   */
  ISO_STATUS_INTERNAL = 9,
} IsoStatus;

/**
 * A chi approximator together with its optimizer moments.
 */
typedef struct IsoModel IsoModel;

/**
 * Metastable diffusion from the built-in catalog.
 */
typedef struct IsoSystem IsoSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static null-terminated string.
 */
const char *iso_version(void);

/**
 * Message for the current thread's most recent failure, or null if the
 * last call succeeded. The pointer is invalidated by the thread's next
 * call into this library.
 */
const char *iso_last_error(void);

/**
 * Look up a potential by catalog name (`harmonic`, `doublewell1d`,
 * `doublewell2d`, `triplewell2d`, `constant`) and return a system handle.
 */
enum IsoStatus iso_system_create(const char *name, struct IsoSystem **out_system);

/**
 * State dimension of the system.
 */
enum IsoStatus iso_system_dim(const struct IsoSystem *system, size_t *out_dim);

/**
 * Noise amplitude of the system.
 */
enum IsoStatus iso_system_sigma(const struct IsoSystem *system, double *out_sigma);

/**
 * Release a system handle. Null is a no-op.
 */
void iso_system_free(struct IsoSystem *system);

/**
 * Load a model checkpoint written by this library or the CLI.
 */
enum IsoStatus iso_model_load(const char *path, struct IsoModel **out_model);

/**
 * Write a model checkpoint to `path`.
 */
enum IsoStatus iso_model_save(const struct IsoModel *model, const char *path);

/**
 * Input dimension the model was built for.
 */
enum IsoStatus iso_model_dim(const struct IsoModel *model, size_t *out_dim);

/**
 * Evaluate chi at one point `x` of length `dim`.
 */
enum IsoStatus iso_model_eval(const struct IsoModel *model,
                              const double *x,
                              size_t dim,
                              double *out_chi);

/**
 * Evaluate chi at `n_points` points stored row-major in `xs`
 * (`n_points * dim` doubles); writes `n_points` values to `out_chi`.
 */
enum IsoStatus iso_model_eval_batch(const struct IsoModel *model,
                                    const double *xs,
                                    size_t n_points,
                                    size_t dim,
                                    double *out_chi);

/**
 * Gradient of chi at `x`; writes `dim` doubles to `out_grad`.
 */
enum IsoStatus iso_model_grad(const struct IsoModel *model,
                              const double *x,
                              size_t dim,
                              double *out_grad);

/**
 * Release a model handle. Null is a no-op.
 */
void iso_model_free(struct IsoModel *model);

/**
 * Run the full learning loop from a TOML configuration file (the same
 * format the CLI reads; missing keys take the library defaults). Returns
 * the trained model, whether the validation change crossed the
 * convergence threshold, and the final affine-fit constants for
 * [`iso_rate_from_params`]. Convergence failure is reported through
 * `out_converged`, not as an error status.
 */
enum IsoStatus iso_train(const char *config_path,
                         struct IsoModel **out_model,
                         bool *out_converged,
                         double *out_a,
                         double *out_b);

/**
 * Plain Monte Carlo estimate of `K^tau chi` at one start point: `m`
 * uncontrolled trajectories of `n_steps` Euler-Maruyama steps of size
 * `dt`, all randomness derived from `seed`.
 */
enum IsoStatus iso_koopman_mean(const struct IsoSystem *system,
                                const struct IsoModel *model,
                                const double *x,
                                size_t dim,
                                size_t m,
                                double dt,
                                size_t n_steps,
                                uint64_t seed,
                                double *out_mean,
                                double *out_std_error);

/**
 * Spectral quantities from affine-fit constants: `lambda = a`,
 * `kappa = -ln(a)/tau`, `chi_infinity = b/(1-a)`. Requires `0 < a < 1`.
 */
enum IsoStatus iso_rate_from_params(double a,
                                    double b,
                                    double tau,
                                    double *out_lambda,
                                    double *out_kappa,
                                    double *out_chi_infinity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISOKANN_H */
