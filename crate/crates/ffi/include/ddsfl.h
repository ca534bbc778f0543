#ifndef DDSFL_H
#define DDSFL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdsflStatus {
  DDSFL_STATUS_OK = 0,
  DDSFL_STATUS_NULL_POINTER = 1,
  DDSFL_STATUS_INVALID_ARGUMENT = 2,
  DDSFL_STATUS_IO = 3,
  DDSFL_STATUS_FORMAT = 4,
  DDSFL_STATUS_NUMERIC = 5,
  DDSFL_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * The model lacks codebooks or a classifier.
   */
  DDSFL_STATUS_INCOMPLETE = 7,
  DDSFL_STATUS_PANIC = 8,
} DdsflStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct DdsflModel DdsflModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *ddsfl_last_error(void);

/**
 * Loads a model file and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DdsflStatus ddsfl_model_load(const char *path, struct DdsflModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`ddsfl_model_load`] and not have been freed.
 */
void ddsfl_model_free(struct DdsflModel *model);

/**
 * Number of layers, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ddsfl_model_num_layers(const struct DdsflModel *model);

/**
 * Number of classes, or 0 when the model has no classifier.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ddsfl_model_num_classes(const struct DdsflModel *model);

/**
 * Length of the descriptor [`ddsfl_describe_gray8`] writes, or 0 when the
 * model has no codebooks.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ddsfl_model_descriptor_len(const struct DdsflModel *model);

/**
 * Computes the descriptor of an 8-bit grayscale image (row-major,
 * `width * height` bytes) into `out`, which must hold at least
 * `out_len >= ddsfl_model_descriptor_len(model)` values.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must point to `width * height`
 * readable bytes and `out` to `out_len` writable doubles.
 */
enum DdsflStatus ddsfl_describe_gray8(const struct DdsflModel *model,
                                      const uint8_t *pixels,
                                      size_t width,
                                      size_t height,
                                      double *out,
                                      size_t out_len);

/**
 * Predicts the class of an 8-bit grayscale image into `*class_id`.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must point to `width * height`
 * readable bytes and `class_id` must be writable.
 */
enum DdsflStatus ddsfl_predict_gray8(const struct DdsflModel *model,
                                     const uint8_t *pixels,
                                     size_t width,
                                     size_t height,
                                     uint32_t *class_id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDSFL_H */
