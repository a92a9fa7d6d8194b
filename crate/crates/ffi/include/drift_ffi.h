#ifndef DRIFT_FFI_H
#define DRIFT_FFI_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DriftStatus {
  DRIFT_STATUS_OK = 0,
  DRIFT_STATUS_NULL_POINTER = 1,
  DRIFT_STATUS_INVALID_ARGUMENT = 2,
  DRIFT_STATUS_SHAPE_MISMATCH = 3,
  DRIFT_STATUS_NON_FINITE = 4,
  DRIFT_STATUS_IO = 5,
  DRIFT_STATUS_PANIC = 6,
} DriftStatus;

/**
 * Drift-field settings.
 */
typedef struct DriftConfigHandle DriftConfigHandle;

/**
 * A particle cloud being transported toward a fixed target sample.
 */
typedef struct DriftTransport DriftTransport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *drift_last_error(void);

/**
 * Default drift-field settings.
 */
enum DriftStatus drift_config_new(struct DriftConfigHandle **out);

/**
 * Settings from a TOML table with the keys `temperatures`, `mu_mask`,
 * `eps`, `include_mask_in_scale` and `lambda_drift`; missing keys keep
 * their defaults.
 */
enum DriftStatus drift_config_from_toml(const char *text, struct DriftConfigHandle **out);

enum DriftStatus drift_config_set_temperatures(struct DriftConfigHandle *cfg,
                                               const double *temperatures,
                                               size_t count);

void drift_config_free(struct DriftConfigHandle *cfg);

/**
 * Drift field of generated features `h` against positives and negatives,
 * all shaped `n x m x c`. Writes the field to `out_v` (`n*m*c` values) and
 * the global scale to `out_scale` if it is not null.
 */
enum DriftStatus drift_compute_field(const struct DriftConfigHandle *cfg,
                                     const double *h,
                                     const double *u_pos,
                                     const double *u_neg,
                                     size_t n,
                                     size_t m,
                                     size_t c,
                                     double *out_v,
                                     double *out_scale);

/**
 * Stop-gradient drift regression on `len` normalized features and drift
 * values: writes the loss and, if `out_grad` is not null, its gradient.
 */
enum DriftStatus drift_loss_value(const double *h_norm,
                                  const double *v,
                                  size_t len,
                                  double *out_loss,
                                  double *out_grad);

/**
 * MGDA coordination of `k >= 2` gradients of length `len`, stored
 * back-to-back in `grads` (`k*len` values). Gradients after the first are
 * scaled by `lambda`. Writes `k` weights to `out_alpha` and, if not null,
 * the combined gradient to `out_combined`.
 */
enum DriftStatus drift_mgda_coordinate(const double *grads,
                                       size_t k,
                                       size_t len,
                                       double lambda,
                                       double *out_alpha,
                                       double *out_combined);

/**
 * Energy distance between `n` points `x` and `p` points `y` in `d`
 * dimensions.
 */
enum DriftStatus drift_energy_distance(const double *x,
                                       size_t n,
                                       const double *y,
                                       size_t p,
                                       size_t d,
                                       double *out);

/**
 * Starts a transport run of `n` particles toward `p` target samples in `d`
 * dimensions. The config is copied.
 */
enum DriftStatus drift_transport_new(const struct DriftConfigHandle *cfg,
                                     const double *particles,
                                     size_t n,
                                     const double *targets,
                                     size_t p,
                                     size_t d,
                                     double eta,
                                     uint64_t seed,
                                     struct DriftTransport **out);

/**
 * Advances the run by `steps` drift steps and writes the energy distance
 * to the targets afterwards to `out_energy` if it is not null.
 */
enum DriftStatus drift_transport_step(struct DriftTransport *t, size_t steps, double *out_energy);

/**
 * Copies the current particles (`len` must equal `n*d`).
 */
enum DriftStatus drift_transport_particles(const struct DriftTransport *t, double *out, size_t len);

/**
 * Steps taken so far.
 */
size_t drift_transport_step_count(const struct DriftTransport *t);

void drift_transport_free(struct DriftTransport *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIFT_FFI_H */
