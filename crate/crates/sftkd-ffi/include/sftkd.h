#ifndef SFTKD_H
#define SFTKD_H

/* Generated from the sftkd-ffi crate; regenerate with `cargo run -p sftkd-ffi --example gen_header` instead of editing. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible call.
 */
typedef enum SftkdStatus {
  SFTKD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SFTKD_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument value is out of range or otherwise unusable.
   */
  SFTKD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Buffer or grid dimensions do not line up.
   */
  SFTKD_STATUS_SHAPE_MISMATCH = 3,
  /**
   * The filesystem refused an operation.
   */
  SFTKD_STATUS_IO_ERROR = 4,
  /**
   * A file exists but its contents are not in the expected format.
   */
  SFTKD_STATUS_FORMAT_ERROR = 5,
  /**
   * A non-finite value appeared, or a metric is undefined for the input.
   */
  SFTKD_STATUS_NUMERIC_ERROR = 6,
  /**
   * An unexpected internal failure; details in `sftkd_last_error`.
   */
  SFTKD_STATUS_INTERNAL_ERROR = 7,
} SftkdStatus;

/**
 * A sampling mask handle.
 */
typedef struct SftkdMask SftkdMask;

/**
 * A cascade model handle (single or double precision, set at load time).
 */
typedef struct SftkdModel SftkdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *sftkd_version(void);

/**
 * Message for the calling thread's most recent failure ("" after success).
 * Valid until the same thread's next call into the library.
 */
const char *sftkd_last_error(void);

/**
 * Static name of a status code ("ok", "null_argument", ...).
 */
const char *sftkd_status_name(enum SftkdStatus status);

/**
 * Generate a Cartesian row mask: a fully sampled center band plus random
 * outer rows, about `h / accel` rows in total. On success `*out` owns the
 * new handle.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SftkdStatus sftkd_mask_generate(uintptr_t h,
                                     uintptr_t w,
                                     uint32_t accel,
                                     double center_fraction,
                                     uint64_t seed,
                                     struct SftkdMask **out);

/**
 * Load a mask from the text format written by `sftkd_mask_save`.
 *
 * # Safety
 * `path` must be a valid nul-terminated string and `out` a valid pointer.
 */
enum SftkdStatus sftkd_mask_load(const char *path, struct SftkdMask **out);

/**
 * Save a mask to its text format.
 *
 * # Safety
 * `mask` must be a live handle; `path` a valid nul-terminated string.
 */
enum SftkdStatus sftkd_mask_save(const struct SftkdMask *mask, const char *path);

/**
 * Mask height, or 0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
uintptr_t sftkd_mask_h(const struct SftkdMask *mask);

/**
 * Mask width, or 0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
uintptr_t sftkd_mask_w(const struct SftkdMask *mask);

/**
 * Fraction of sampled rows, or -1.0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
double sftkd_mask_sampled_fraction(const struct SftkdMask *mask);

/**
 * Release a mask handle (null is a no-op).
 *
 * # Safety
 * `mask` must be null or a handle not freed before.
 */
void sftkd_mask_free(struct SftkdMask *mask);

/**
 * Build a freshly initialized single-precision cascade model: `c` blocks of
 * `d` conv layers at the given hidden width, He-normal init derived from
 * `seed`, exact data-fidelity units.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SftkdStatus sftkd_model_build(uintptr_t d,
                                   uintptr_t c,
                                   uintptr_t channels,
                                   uint64_t seed,
                                   struct SftkdModel **out);

/**
 * Load a cascade checkpoint (`<name>.toml` + `<name>.bin`); the stored
 * precision is preserved.
 *
 * # Safety
 * `path` must be a valid nul-terminated string and `out` a valid pointer.
 */
enum SftkdStatus sftkd_model_load(const char *path, struct SftkdModel **out);

/**
 * Save a model as a checkpoint; `stage` is a free-form label recorded in
 * the manifest.
 *
 * # Safety
 * `model` must be a live handle; `path` and `stage` valid strings.
 */
enum SftkdStatus sftkd_model_save(const struct SftkdModel *model,
                                  const char *path,
                                  const char *stage);

/**
 * Total parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t sftkd_model_param_count(const struct SftkdModel *model);

/**
 * Conv layers per block, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t sftkd_model_depth(const struct SftkdModel *model);

/**
 * Cascade block count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t sftkd_model_cascades(const struct SftkdModel *model);

/**
 * Release a model handle (null is a no-op).
 *
 * # Safety
 * `model` must be null or a handle not freed before.
 */
void sftkd_model_free(struct SftkdModel *model);

/**
 * Reconstruct an image from undersampled k-space. `kspace` holds
 * `2 * h * w` doubles (re/im interleaved, row-major) for the mask's grid;
 * `out_image` receives `h * w` doubles.
 *
 * # Safety
 * All pointers must be valid for the sizes implied by the mask.
 */
enum SftkdStatus sftkd_reconstruct(const struct SftkdModel *model,
                                   const struct SftkdMask *mask,
                                   const double *kspace,
                                   double *out_image);

/**
 * Apply the forward operator: FFT an image and keep the sampled rows.
 * `image` holds `h * w` doubles; `out_kspace` receives `2 * h * w` doubles
 * (re/im interleaved).
 *
 * # Safety
 * All pointers must be valid for the sizes implied by the mask.
 */
enum SftkdStatus sftkd_simulate(const struct SftkdMask *mask,
                                const double *image,
                                double *out_kspace);

/**
 * Zero-filled baseline: inverse FFT of the measurements, real part.
 * `kspace` holds `2 * h * w` interleaved doubles; `out_image` receives
 * `h * w` doubles.
 *
 * # Safety
 * All pointers must be valid for the sizes implied by the mask.
 */
enum SftkdStatus sftkd_zero_filled(const struct SftkdMask *mask,
                                   const double *kspace,
                                   double *out_image);

/**
 * Peak signal-to-noise ratio of `pred` against `reference` (both `len`
 * doubles; peak is the reference maximum, result capped at 100 dB).
 *
 * # Safety
 * `pred` and `reference` must hold `len` doubles; `out_db` must be valid.
 */
enum SftkdStatus sftkd_psnr(const double *pred,
                            const double *reference,
                            uintptr_t len,
                            double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFTKD_H */
