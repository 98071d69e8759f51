#ifndef CHROMA_H
#define CHROMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Values 1 to 4 match the command-line exit codes.
 */
typedef enum ChromaStatus {
  CHROMA_STATUS_OK = 0,
  /**
   * A self-check failed.
   */
  CHROMA_STATUS_CHECK_FAILED = 1,
  /**
   * A file could not be read or is malformed.
   */
  CHROMA_STATUS_IO = 2,
  /**
   * A computation produced non-finite values.
   */
  CHROMA_STATUS_DIVERGED = 3,
  /**
   * Incompatible configuration, size or vocabulary.
   */
  CHROMA_STATUS_CONFIG = 4,
  /**
   * A required pointer was null.
   */
  CHROMA_STATUS_NULL_POINTER = 5,
  /**
   * An output buffer is too small; the required size was written.
   */
  CHROMA_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * An argument is out of range or not valid UTF-8.
   */
  CHROMA_STATUS_INVALID_ARGUMENT = 7,
  /**
   * An internal panic was caught at the boundary.
   */
  CHROMA_STATUS_PANIC = 8,
} ChromaStatus;

/**
 * Loaded model. Opaque to C.
 */
typedef struct ChromaModel ChromaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or an empty
 * string if none. Valid until the next failing call on the same thread.
 */
const char *chroma_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *chroma_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ChromaStatus chroma_model_load(const char *path, struct ChromaModel **out);

/**
 * Releases a handle from [`chroma_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void chroma_model_free(struct ChromaModel *model);

/**
 * Number of color names in the model's vocabulary.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum ChromaStatus chroma_model_num_classes(const struct ChromaModel *model, size_t *out);

/**
 * Copies color name `index` into `buf` as a NUL-terminated string.
 * `*needed` receives the size including the terminator; when `buf_len` is
 * smaller, nothing is copied and `BufferTooSmall` is returned.
 *
 * # Safety
 * `model` must be a live handle, `needed` valid, and `buf` valid for
 * `buf_len` bytes (it may be null when `buf_len` is 0).
 */
enum ChromaStatus chroma_model_class_name(const struct ChromaModel *model,
                                          size_t index,
                                          char *buf,
                                          size_t buf_len,
                                          size_t *needed);

/**
 * Classifies a `height x width` RGB image given as interleaved 8-bit
 * samples, row-major.
 *
 * Writes the image-level distribution into `probabilities`
 * (`num_classes` entries) and its argmax into `predicted`. Optional
 * outputs (null to skip): `attention` receives `width * height` values of
 * the attention map at image size, `names` the per-pixel color name index.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` bytes; every non-null output must be
 * valid for the length given.
 */
enum ChromaStatus chroma_model_predict(const struct ChromaModel *model,
                                       const uint8_t *rgb,
                                       size_t width,
                                       size_t height,
                                       double *probabilities,
                                       size_t probabilities_len,
                                       size_t *predicted,
                                       float *attention,
                                       uint32_t *names);

/**
 * Runs the finite-difference gradient suite. `*passed` is 1 when every
 * check passes and 0 otherwise.
 *
 * # Safety
 * `passed` must be a valid pointer.
 */
enum ChromaStatus chroma_gradcheck(int32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHROMA_H */
