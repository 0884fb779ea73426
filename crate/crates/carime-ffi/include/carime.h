/* C interface to the carime caricature-generation library. */

#ifndef CARIME_H
#define CARIME_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every FFI call.
 */
typedef enum CarimeStatus {
  CARIME_STATUS_OK = 0,
  CARIME_STATUS_INVALID_ARGUMENT = 1,
  CARIME_STATUS_IO = 2,
  CARIME_STATUS_SHAPE = 3,
  CARIME_STATUS_DATASET = 4,
  CARIME_STATUS_CONFIG = 5,
  CARIME_STATUS_CHECKPOINT = 6,
  CARIME_STATUS_NUMERIC = 7,
  CARIME_STATUS_INTERNAL = 8,
  CARIME_STATUS_NULL_POINTER = 9,
} CarimeStatus;

/**
 * Opaque dense deformation field.
 */
typedef struct CarimeField CarimeField;

/**
 * Opaque RGB image.
 */
typedef struct CarimeImage CarimeImage;

/**
 * Opaque 17-point landmark set.
 */
typedef struct CarimeLandmarks CarimeLandmarks;

/**
 * Opaque styler model handle.
 */
typedef struct CarimeStyler CarimeStyler;

/**
 * Opaque warper model handle.
 */
typedef struct CarimeWarper CarimeWarper;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *carime_last_error_message(void);

/**
 * Reads a 17-point landmark file. `width`/`height` supply the image size for
 * untagged files (pass 0, 0 if the file carries a size tag).
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must point to writable storage.
 */
enum CarimeStatus carime_landmarks_read(const char *path,
                                        uint32_t width,
                                        uint32_t height,
                                        struct CarimeLandmarks **out);

/**
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void carime_landmarks_free(struct CarimeLandmarks *handle);

/**
 * Builds the dense field that warps `dst`-geometry images back toward `src`
 * geometry, optionally pinning the image border.
 *
 * # Safety
 * Handles must be valid; `out` must be writable.
 */
enum CarimeStatus carime_field_from_landmarks(const struct CarimeLandmarks *src,
                                              const struct CarimeLandmarks *dst,
                                              int anchor_border,
                                              struct CarimeField **out);

/**
 * Mean per-pixel displacement magnitude in pixels.
 *
 * # Safety
 * `field` must be valid; `out` must be writable.
 */
enum CarimeStatus carime_field_degree(const struct CarimeField *field, double *out);

/**
 * Multiplies every displacement by `scale`.
 *
 * # Safety
 * `field` must be valid; `out` must be writable.
 */
enum CarimeStatus carime_field_scale(const struct CarimeField *field,
                                     double scale,
                                     struct CarimeField **out);

/**
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void carime_field_free(struct CarimeField *handle);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum CarimeStatus carime_image_load(const char *path, struct CarimeImage **out);

/**
 * # Safety
 * Handles/paths as above.
 */
enum CarimeStatus carime_image_save_png(const struct CarimeImage *image, const char *path);

/**
 * # Safety
 * `image` must be valid; `width`/`height` must be writable.
 */
enum CarimeStatus carime_image_size(const struct CarimeImage *image,
                                    uint32_t *width,
                                    uint32_t *height);

/**
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void carime_image_free(struct CarimeImage *handle);

/**
 * Backward bilinear warp of an image by a deformation field of the same
 * resolution.
 *
 * # Safety
 * Handles must be valid; `out` must be writable.
 */
enum CarimeStatus carime_warp_image(const struct CarimeImage *image,
                                    const struct CarimeField *field,
                                    struct CarimeImage **out);

/**
 * Loads a warper checkpoint. `config_path` may be NULL for the default
 * configuration; set `force` to skip the config-hash check.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be writable.
 */
enum CarimeStatus carime_warper_load(const char *checkpoint_path,
                                     const char *config_path,
                                     int force,
                                     struct CarimeWarper **out);

/**
 * Length of the warp code vector the warper expects.
 *
 * # Safety
 * `warper` must be valid; `out` must be writable.
 */
enum CarimeStatus carime_warper_code_dim(const struct CarimeWarper *warper, uintptr_t *out);

/**
 * Warps a photo by the exaggeration decoded from `warp_code`
 * (`code_len` floats), scaled by `scale`. The photo must match the model's
 * working resolution.
 *
 * # Safety
 * Handles and buffers must be valid; `out_image` must be writable.
 */
enum CarimeStatus carime_warper_generate(const struct CarimeWarper *warper,
                                         const struct CarimeImage *photo,
                                         const float *warp_code,
                                         uintptr_t code_len,
                                         double scale,
                                         struct CarimeImage **out_image);

/**
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void carime_warper_free(struct CarimeWarper *handle);

/**
 * Loads a styler checkpoint; see `carime_warper_load` for the conventions.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be writable.
 */
enum CarimeStatus carime_styler_load(const char *checkpoint_path,
                                     const char *config_path,
                                     int force,
                                     struct CarimeStyler **out);

/**
 * Renders an image in the texture described by `style_code`
 * (`code_len` floats).
 *
 * # Safety
 * Handles and buffers must be valid; `out_image` must be writable.
 */
enum CarimeStatus carime_styler_stylize(const struct CarimeStyler *styler,
                                        const struct CarimeImage *image,
                                        const float *style_code,
                                        uintptr_t code_len,
                                        struct CarimeImage **out_image);

/**
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void carime_styler_free(struct CarimeStyler *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARIME_H */
