#ifndef DIFFENC_H
#define DIFFENC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DiffencEncoderKind {
  DIFFENC_ENCODER_KIND_IDENTITY = 0,
  DIFFENC_ENCODER_KIND_NON_TRAINABLE = 1,
  DIFFENC_ENCODER_KIND_TRAINABLE = 2,
} DiffencEncoderKind;

typedef enum DiffencStatus {
  DIFFENC_STATUS_OK = 0,
  DIFFENC_STATUS_NULL_POINTER = 1,
  DIFFENC_STATUS_DOMAIN = 2,
  DIFFENC_STATUS_CONFIG = 3,
  DIFFENC_STATUS_PARSE = 4,
  DIFFENC_STATUS_NUMERICAL = 5,
  DIFFENC_STATUS_CHECKPOINT = 6,
  DIFFENC_STATUS_IO = 7,
  DIFFENC_STATUS_BUFFER_TOO_SMALL = 8,
  DIFFENC_STATUS_PANIC = 9,
} DiffencStatus;

/**
 * Opaque model handle.
 */
typedef struct DiffencModel DiffencModel;

/**
 * Opaque schedule handle.
 */
typedef struct DiffencSchedule DiffencSchedule;

typedef struct DiffencSchedulePoint {
  double t;
  double lambda;
  double alpha;
  double sigma;
  double snr;
} DiffencSchedulePoint;

/**
 * Loss components in bits per dimension.
 */
typedef struct DiffencLossBreakdown {
  double total_bpd;
  double latent_bpd;
  double diffusion_bpd;
  double diffusion_se_bpd;
  double reconstruction_bpd;
} DiffencLossBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf` (truncating to fit) and returns the full message length in bytes
 * excluding the terminator. `buf` may be null when `len` is 0.
 *
 * # Safety
 * `buf` must point to `len` writable bytes when `len > 0`.
 */
size_t diffenc_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum DiffencStatus diffenc_schedule_new(double lambda_max,
                                        double lambda_min,
                                        struct DiffencSchedule **out);

/**
 * # Safety
 * `schedule` must be null or a handle from `diffenc_schedule_new` that has
 * not been freed.
 */
void diffenc_schedule_free(struct DiffencSchedule *schedule);

/**
 * # Safety
 * `schedule` must be a live handle and `out` writable.
 */
enum DiffencStatus diffenc_schedule_eval(const struct DiffencSchedule *schedule,
                                         double t,
                                         struct DiffencSchedulePoint *out);

/**
 * KL between `N(mean_q, var_q I)` and `N(mean_p, var_p I)` of dimension `d`.
 *
 * # Safety
 * The mean pointers must reference `d` readable doubles; `out` writable.
 */
enum DiffencStatus diffenc_kl_isotropic(const double *mean_q,
                                        double var_q,
                                        const double *mean_p,
                                        double var_p,
                                        size_t d,
                                        double *out);

/**
 * Variance `σ_P²` minimizing the expected KL for a mean-squared gap.
 *
 * # Safety
 * `out` must be writable.
 */
enum DiffencStatus diffenc_optimal_sigma_p(double sigma2_q,
                                           double mean_sq_gap,
                                           size_t d,
                                           double *out);

/**
 * Loads a checkpoint written by the library or CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` a valid handle slot.
 */
enum DiffencStatus diffenc_model_load(const char *path, struct DiffencModel **out);

/**
 * # Safety
 * `model` must be null or a live handle from `diffenc_model_load`.
 */
void diffenc_model_free(struct DiffencModel *model);

/**
 * # Safety
 * `model` must be a live handle; the out pointers writable.
 */
enum DiffencStatus diffenc_model_info(const struct DiffencModel *model,
                                      size_t *dim,
                                      enum DiffencEncoderKind *kind);

/**
 * `v̂` for `n` latents (row-major `n × dim`) at time `t`.
 *
 * # Safety
 * `z` and `out` must each reference `n · dim` doubles.
 */
enum DiffencStatus diffenc_model_predict_v(const struct DiffencModel *model,
                                           const double *z,
                                           size_t n,
                                           double t,
                                           double *out);

/**
 * Draws `n` ancestral samples with `steps` reverse steps and writes the
 * decoded 8-bit values (`n × dim`) to `out`, whose capacity is `out_len`.
 *
 * # Safety
 * `out` must reference `out_len` writable bytes.
 */
enum DiffencStatus diffenc_model_sample(const struct DiffencModel *model,
                                        size_t steps,
                                        size_t n,
                                        uint64_t seed,
                                        bool counterterm,
                                        uint8_t *out,
                                        size_t out_len);

/**
 * Negative ELBO in bits per dimension of `n` datapoints (`n × dim` bytes).
 *
 * # Safety
 * `pixels` must reference `n · dim` bytes; `out` writable.
 */
enum DiffencStatus diffenc_model_elbo(const struct DiffencModel *model,
                                      const uint8_t *pixels,
                                      size_t n,
                                      size_t n_mc,
                                      uint64_t seed,
                                      bool counterterm,
                                      struct DiffencLossBreakdown *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DIFFENC_H */
