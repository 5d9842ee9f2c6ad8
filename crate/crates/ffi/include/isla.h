#ifndef ISLA_H
#define ISLA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IslaStatus {
  ISLA_STATUS_OK = 0,
  ISLA_STATUS_NULL_POINTER = 1,
  ISLA_STATUS_INVALID_UTF8 = 2,
  ISLA_STATUS_CHECKPOINT = 3,
  ISLA_STATUS_INVALID_LAYOUT = 4,
  ISLA_STATUS_RESOLUTION_MISMATCH = 5,
  ISLA_STATUS_OUT_OF_RANGE = 6,
  ISLA_STATUS_INTERNAL = 7,
} IslaStatus;

/**
 * A loaded generator.
 */
typedef struct IslaModel IslaModel;

/**
 * PNG outputs of one synthesis call.
 */
typedef struct IslaResult IslaResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *isla_last_error(void);

/**
 * Loads a checkpoint. With `alpha_zero`, every mask blend weight is forced
 * to zero.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IslaStatus isla_model_load(const char *path, bool alpha_zero, struct IslaModel **out);

/**
 * # Safety
 * `model` must come from [`isla_model_load`] and not be used afterwards.
 */
void isla_model_free(struct IslaModel *model);

/**
 * Side length of the images the model produces.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum IslaStatus isla_model_resolution(const struct IslaModel *model, uint32_t *out);

/**
 * Synthesizes the layout document `layout_json`.
 *
 * # Safety
 * `model` must be a live handle, `layout_json` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum IslaStatus isla_synthesize(const struct IslaModel *model,
                                const char *layout_json,
                                struct IslaResult **out);

/**
 * # Safety
 * `result` must come from [`isla_synthesize`] and not be used afterwards.
 */
void isla_result_free(struct IslaResult *result);

/**
 * RGB image as PNG bytes, owned by `result`.
 *
 * # Safety
 * `result` must be a live handle; `data` and `len` valid pointers.
 */
enum IslaStatus isla_result_image(const struct IslaResult *result,
                                  const uint8_t **data,
                                  size_t *len);

/**
 * Colour-coded label map as PNG bytes, owned by `result`.
 *
 * # Safety
 * `result` must be a live handle; `data` and `len` valid pointers.
 */
enum IslaStatus isla_result_label_map(const struct IslaResult *result,
                                      const uint8_t **data,
                                      size_t *len);

/**
 * Number of foreground instance masks.
 *
 * # Safety
 * `result` must be a live handle and `out` a valid pointer.
 */
enum IslaStatus isla_result_mask_count(const struct IslaResult *result, size_t *out);

/**
 * Soft mask of foreground instance `index` as grayscale PNG bytes.
 *
 * # Safety
 * `result` must be a live handle; `data` and `len` valid pointers.
 */
enum IslaStatus isla_result_mask(const struct IslaResult *result,
                                 size_t index,
                                 const uint8_t **data,
                                 size_t *len);

/**
 * Effective style seeds as a JSON object, owned by `result`.
 *
 * # Safety
 * `result` must be a live handle.
 */
const char *isla_result_style(const struct IslaResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISLA_H */
