#ifndef TM_DIFFUSE_H
#define TM_DIFFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum TmdStatus {
  TMD_STATUS_OK = 0,
  TMD_STATUS_NULL_POINTER = 1,
  TMD_STATUS_INVALID_ARGUMENT = 2,
  TMD_STATUS_SHAPE_MISMATCH = 3,
  TMD_STATUS_NUMERIC = 4,
  TMD_STATUS_CHECKPOINT = 5,
  TMD_STATUS_IO = 6,
  TMD_STATUS_PARSE = 7,
  TMD_STATUS_PANIC = 8,
} TmdStatus;

/**
 * Trained model handle (denoiser, schedule and normalization).
 */
typedef struct TmdModel TmdModel;

/**
 * Noise schedule handle.
 */
typedef struct TmdSchedule TmdSchedule;

/**
 * Sampler settings. Obtain defaults from [`tmd_guidance_default`].
 */
typedef struct TmdGuidance {
  /**
   * Guidance step size; 0 disables gradient guidance.
   */
  double rho;
  /**
   * Reverse-step jump size (at least 1).
   */
  size_t stride;
  /**
   * EM refinement sweeps after tomography sampling.
   */
  size_t em_iters;
  /**
   * Nonzero to overwrite observed entries with noised measurements.
   */
  uint8_t replacement;
  uint64_t seed;
  /**
   * Windows per denoiser call.
   */
  size_t batch_size;
  /**
   * Worker threads; results do not depend on it.
   */
  size_t jobs;
} TmdGuidance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *tmd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tmd_version(void);

/**
 * Default sampler settings.
 */
struct TmdGuidance tmd_guidance_default(void);

/**
 * Cosine schedule with `steps` diffusion steps.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum TmdStatus tmd_schedule_cosine(size_t steps, struct TmdSchedule **out);

/**
 * # Safety
 * `schedule` must be NULL or a handle from [`tmd_schedule_cosine`] not yet freed.
 */
void tmd_schedule_free(struct TmdSchedule *schedule);

/**
 * Number of diffusion steps `T`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a valid pointer.
 */
enum TmdStatus tmd_schedule_steps(const struct TmdSchedule *schedule, size_t *out);

/**
 * Cumulative signal level `ᾱ_t` for `t` in `0..=T`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a valid pointer.
 */
enum TmdStatus tmd_schedule_alpha_bar(const struct TmdSchedule *schedule, size_t t, double *out);

/**
 * Loads a checkpoint written by `tm-diffuse train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TmdStatus tmd_model_load(const char *path, struct TmdModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`tmd_model_load`] not yet freed.
 */
void tmd_model_free(struct TmdModel *model);

/**
 * Window shape and step count of a model. Any output pointer may be NULL.
 *
 * # Safety
 * `model` must be a live handle; non-NULL outputs must be valid pointers.
 */
enum TmdStatus tmd_model_shape(const struct TmdModel *model,
                               size_t *flows,
                               size_t *window_len,
                               size_t *steps);

/**
 * Traffic scale used to normalize the training data, or 0 when unknown.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum TmdStatus tmd_model_scale(const struct TmdModel *model, double *out);

/**
 * Draws `count` normalized windows into `out` (`count × flows × window_len`).
 *
 * # Safety
 * `model` must be a live handle, `guidance` valid, and `out` hold the full batch.
 */
enum TmdStatus tmd_sample_unconditional(const struct TmdModel *model,
                                        size_t count,
                                        const struct TmdGuidance *guidance,
                                        double *out);

/**
 * Flows from normalized link loads.
 *
 * `routing` is `links × flows`; `loads` is `count` consecutive `links × window_len`
 * matrices; `out` receives `count × flows × window_len` values.
 *
 * # Safety
 * All pointers must be valid for the stated sizes.
 */
enum TmdStatus tmd_sample_tomography(const struct TmdModel *model,
                                     const double *routing,
                                     size_t links,
                                     const double *loads,
                                     size_t count,
                                     const struct TmdGuidance *guidance,
                                     double *out);

/**
 * Completes `count` windows from `known` values where `mask` is 1.
 * Observed entries of `out` equal `known` exactly.
 *
 * # Safety
 * `known`, `mask` and `out` must each hold `count × flows × window_len` doubles.
 */
enum TmdStatus tmd_sample_completion(const struct TmdModel *model,
                                     const double *known,
                                     const double *mask,
                                     size_t count,
                                     const struct TmdGuidance *guidance,
                                     double *out);

/**
 * Multiplicative EM refinement of a nonnegative `x` (length `flows`) towards
 * `routing · x = y`, in place.
 *
 * # Safety
 * `x` holds `flows` doubles, `routing` `links × flows`, `y` `links`.
 */
enum TmdStatus tmd_em_refine(double *x,
                             const double *routing,
                             const double *y,
                             size_t links,
                             size_t flows,
                             size_t iters);

/**
 * Normalized mean absolute error over entries where `mask` is 0, or over
 * every entry when `mask` is NULL.
 *
 * # Safety
 * `truth`, `estimate` hold `rows × cols` doubles; `mask` is NULL or the same size.
 */
enum TmdStatus tmd_nmae(const double *truth,
                        const double *estimate,
                        const double *mask,
                        size_t rows,
                        size_t cols,
                        double *out);

/**
 * Normalized root mean squared error, with the same conventions as [`tmd_nmae`].
 *
 * # Safety
 * As for [`tmd_nmae`].
 */
enum TmdStatus tmd_nrmse(const double *truth,
                         const double *estimate,
                         const double *mask,
                         size_t rows,
                         size_t cols,
                         double *out);

/**
 * Unbiased squared MMD between `n` and `m` samples of dimension `dim` (one
 * sample per row). `bandwidth <= 0` selects the median heuristic.
 *
 * # Safety
 * `xs` holds `n × dim` doubles and `ys` `m × dim`.
 */
enum TmdStatus tmd_mmd2(const double *xs,
                        size_t n,
                        const double *ys,
                        size_t m,
                        size_t dim,
                        double bandwidth,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TM_DIFFUSE_H */
