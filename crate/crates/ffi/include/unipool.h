#ifndef UNIPOOL_H
#define UNIPOOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Values 1 to 3 match the command-line exit codes.
 */
typedef enum {
  UNIPOOL_STATUS_OK = 0,
  /**
   * Invalid argument, configuration or shape.
   */
  UNIPOOL_STATUS_USAGE = 1,
  /**
   * Unreadable or malformed file.
   */
  UNIPOOL_STATUS_DATA = 2,
  /**
   * Non-finite values or other numerical failure.
   */
  UNIPOOL_STATUS_NUMERICAL = 3,
  /**
   * A required pointer was null.
   */
  UNIPOOL_STATUS_NULL_POINTER = 4,
  /**
   * The library panicked; the handle involved should be freed.
   */
  UNIPOOL_STATUS_PANIC = 5,
} UnipoolStatus;

/**
 * Opaque model handle.
 */
typedef struct UnipoolModel UnipoolModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *unipool_version(void);

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *unipool_last_error_message(void);

/**
 * Builds a freshly initialized model from `key = value` text.
 *
 * Keys: `arch`, `pool.local`, `pool.global`, `pool.shared`,
 * `model.num_classes`, `model.input_shape` (such as `3 32 32`) and
 * `precision` (`32` or `64`, default 32). Omitted pooling keys default to
 * `max` / `avg`, omitted model keys to 10 classes of 3×32×32 images.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a writable pointer.
 */
UnipoolStatus unipool_model_new(const char *config, uint64_t seed, UnipoolModel **out);

/**
 * Loads a checkpoint written by the command-line trainer or
 * [`unipool_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
UnipoolStatus unipool_model_load(const char *path, UnipoolModel **out);

/**
 * Writes the model, its optimizer state and run state to `path`.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
UnipoolStatus unipool_model_save(const UnipoolModel *model, const char *path);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
UnipoolStatus unipool_model_num_classes(const UnipoolModel *model, uintptr_t *out);

/**
 * `[C, H, W]` of one input image.
 *
 * # Safety
 * `model` must come from this library; `out` must hold 3 writable values.
 */
UnipoolStatus unipool_model_input_shape(const UnipoolModel *model, uintptr_t *out);

/**
 * Inference-mode logits for `batch` images laid out `[N, C, H, W]`.
 * `input_len` must be `batch·C·H·W` and `logits_len` `batch·classes`.
 *
 * # Safety
 * `model` must come from this library; the buffers must hold the stated
 * number of elements.
 */
UnipoolStatus unipool_model_forward(const UnipoolModel *model,
                                    const double *input,
                                    uintptr_t input_len,
                                    uintptr_t batch,
                                    double *logits,
                                    uintptr_t logits_len);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void unipool_model_free(UnipoolModel *model);

/**
 * Parameter-free pooling of an `[N, C, H, W]` map at 64-bit with disjoint
 * `size`×`size` blocks. `method` is `max`, `avg`, `stride` or
 * `stride:r,c`. `out_len` must be `N·C·⌊H/size⌋·⌊W/size⌋`.
 *
 * # Safety
 * `method` must be NUL-terminated; `dims` must hold 4 values; the buffers
 * must hold the stated number of elements.
 */
UnipoolStatus unipool_pool2d(const char *method,
                             const double *input,
                             const uintptr_t *dims,
                             uintptr_t size,
                             double *out,
                             uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIPOOL_H */
