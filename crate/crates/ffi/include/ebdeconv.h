#ifndef EBDECONV_H
#define EBDECONV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum EbdFamily {
  EBD_FAMILY_GAUSSIAN = 0,
  EBD_FAMILY_LAPLACE = 1,
  EBD_FAMILY_MOFFAT = 2,
} EbdFamily;

typedef enum EbdStatus {
  EBD_STATUS_OK = 0,
  EBD_STATUS_NULL_POINTER = 1,
  EBD_STATUS_INVALID_ARGUMENT = 2,
  EBD_STATUS_CONFIG = 3,
  EBD_STATUS_NUMERICAL = 4,
  EBD_STATUS_IO = 5,
  EBD_STATUS_PANIC = 6,
} EbdStatus;

/**
 * Result of a calibration run.
 */
typedef struct EbdCalibration EbdCalibration;

/**
 * Grayscale image, row-major `f64`.
 */
typedef struct EbdImage EbdImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or NULL. Valid until the next call
 * into the library from the same thread.
 */
const char *ebd_last_error(void);

/**
 * Copies `rows * cols` values from `data` into a new image.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum EbdStatus ebd_image_new(size_t rows, size_t cols, const double *data, struct EbdImage **out);

/**
 * Reads a PNG, PGM or `.npy` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EbdStatus ebd_image_load(const char *path, struct EbdImage **out);

/**
 * Writes the image; the format follows the extension.
 *
 * # Safety
 * `image` must be a live handle and `path` a NUL-terminated string.
 */
enum EbdStatus ebd_image_save(const struct EbdImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle or NULL (returns 0).
 */
size_t ebd_image_rows(const struct EbdImage *image);

/**
 * # Safety
 * `image` must be a live handle or NULL (returns 0).
 */
size_t ebd_image_cols(const struct EbdImage *image);

/**
 * Copies the pixels into `out`, which must hold `len >= rows * cols` values.
 *
 * # Safety
 * `image` must be a live handle and `out` writable for `len` doubles.
 */
enum EbdStatus ebd_image_copy_data(const struct EbdImage *image, double *out, size_t len);

/**
 * # Safety
 * `image` must come from this library and not be used afterwards.
 */
void ebd_image_free(struct EbdImage *image);

/**
 * Blurs `x` with the given kernel and adds Gaussian noise at `bsnr_db`
 * (pass `INFINITY` for no noise). `sigma2_out` may be NULL.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `y_out` must be writable.
 */
enum EbdStatus ebd_degrade(const struct EbdImage *x,
                           enum EbdFamily family,
                           const double *alpha,
                           size_t n_alpha,
                           double bsnr_db,
                           uint64_t seed,
                           struct EbdImage **y_out,
                           double *sigma2_out);

/**
 * Calibrates `(theta, alpha, sigma2)` from `y` with a TV prior.
 * `config_json` is a serialized SAPG configuration, or NULL for the desk
 * preset of `family`; `seed` overrides the configured seed.
 *
 * # Safety
 * `y` must be a live handle, `config_json` NULL or NUL-terminated, `out`
 * writable.
 */
enum EbdStatus ebd_calibrate(const struct EbdImage *y,
                             enum EbdFamily family,
                             const char *config_json,
                             uint64_t seed,
                             struct EbdCalibration **out);

/**
 * Writes the averaged estimates. `alpha` must hold `alpha_cap` values;
 * `n_alpha` receives the family's parameter count.
 *
 * # Safety
 * `cal` must be a live handle and every output pointer writable.
 */
enum EbdStatus ebd_calibration_estimate(const struct EbdCalibration *cal,
                                        double *theta,
                                        double *alpha,
                                        size_t alpha_cap,
                                        size_t *n_alpha,
                                        double *sigma2);

/**
 * JSON summary of the run; release with [`ebd_string_free`].
 *
 * # Safety
 * `cal` must be a live handle and `out` writable.
 */
enum EbdStatus ebd_calibration_summary_json(const struct EbdCalibration *cal, char **out);

/**
 * Number of SAPG iterations recorded in the trace.
 *
 * # Safety
 * `cal` must be a live handle or NULL (returns 0).
 */
size_t ebd_calibration_iterations(const struct EbdCalibration *cal);

/**
 * # Safety
 * `cal` must come from this library and not be used afterwards.
 */
void ebd_calibration_free(struct EbdCalibration *cal);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void ebd_string_free(char *s);

/**
 * TV-regularized MAP estimate for fixed parameters.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum EbdStatus ebd_deconvolve(const struct EbdImage *y,
                              enum EbdFamily family,
                              double theta,
                              const double *alpha,
                              size_t n_alpha,
                              double sigma2,
                              struct EbdImage **out);

/**
 * Finite-difference check of the analytic gradients on a `size x size`
 * random instance. `pass` receives 1 or 0.
 *
 * # Safety
 * `alpha` must hold `n_alpha` values; outputs must be writable.
 */
enum EbdStatus ebd_gradcheck(enum EbdFamily family,
                             const double *alpha,
                             size_t n_alpha,
                             size_t size,
                             uint64_t seed,
                             double *max_rel_error,
                             int *pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EBDECONV_H */
