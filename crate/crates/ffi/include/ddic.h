#ifndef DDIC_H
#define DDIC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DdicStatus {
  DDIC_STATUS_OK = 0,
  /**
   * Null pointer, zero size or a non-UTF-8 path.
   */
  DDIC_STATUS_INVALID_ARGUMENT = 1,
  DDIC_STATUS_CONFIG = 2,
  DDIC_STATUS_DATA = 3,
  DDIC_STATUS_IO = 4,
  DDIC_STATUS_NUMERIC = 5,
  DDIC_STATUS_CHECKPOINT = 6,
  DDIC_STATUS_NOT_DIFFERENTIABLE = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  DDIC_STATUS_INTERNAL = 8,
} DdicStatus;

/**
 * A trained noise predictor.
 */
typedef struct DdicDenoiser DdicDenoiser;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ddic_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ddic_last_error_message(void);

/**
 * Loads a model checkpoint (JSON) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DdicStatus ddic_denoiser_load(const char *path, struct DdicDenoiser **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `den` must come from [`ddic_denoiser_load`] and not be used afterwards.
 */
void ddic_denoiser_free(struct DdicDenoiser *den);

/**
 * Input shape, diffusion step count and intensity range of a model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DdicStatus ddic_denoiser_info(const struct DdicDenoiser *den,
                                   size_t *height,
                                   size_t *width,
                                   size_t *steps,
                                   double *range_lo,
                                   double *range_hi);

/**
 * Plain bridge translation: encode with `src`, decode with `dst`.
 *
 * # Safety
 * `input` and `output` must each hold `height * width` doubles.
 */
enum DdicStatus ddic_translate_ddib(const struct DdicDenoiser *src,
                                    const struct DdicDenoiser *dst,
                                    size_t height,
                                    size_t width,
                                    const double *input,
                                    double *output);

/**
 * Correlation-guided translation with step size `lr` and an odd median
 * window `median_kernel`. `lr = 0` reproduces [`ddic_translate_ddib`].
 *
 * # Safety
 * `input` and `output` must each hold `height * width` doubles.
 */
enum DdicStatus ddic_translate_ddic(const struct DdicDenoiser *src,
                                    const struct DdicDenoiser *dst,
                                    size_t height,
                                    size_t width,
                                    const double *input,
                                    double lr,
                                    size_t median_kernel,
                                    double *output);

/**
 * Mutual information in bits with `bins` bins over each image's own range.
 *
 * # Safety
 * `x` and `y` must each hold `height * width` doubles; `out` must be valid.
 */
enum DdicStatus ddic_mutual_information(const double *x,
                                        const double *y,
                                        size_t height,
                                        size_t width,
                                        size_t bins,
                                        double *out);

/**
 * PSNR in dB of the 8-bit quantizations; identical images give infinity.
 * Each image is quantized over `[range_lo, range_hi]`.
 *
 * # Safety
 * `x` and `y` must each hold `height * width` doubles; `out` must be valid.
 */
enum DdicStatus ddic_psnr(const double *x,
                          const double *y,
                          size_t height,
                          size_t width,
                          double range_lo,
                          double range_hi,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDIC_H */
