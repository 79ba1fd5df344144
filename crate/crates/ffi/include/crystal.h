#ifndef CRYSTAL_H
#define CRYSTAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of activations every classify call writes.
 */
#define CRYSTAL_NUM_CLASSES 10

typedef enum CrystalStatus {
  CRYSTAL_STATUS_OK = 0,
  CRYSTAL_STATUS_NULL_ARGUMENT = 1,
  CRYSTAL_STATUS_INVALID_ARGUMENT = 2,
  CRYSTAL_STATUS_IO = 3,
  CRYSTAL_STATUS_CHECKPOINT = 4,
  CRYSTAL_STATUS_IMAGE = 5,
  CRYSTAL_STATUS_SHAPE_MISMATCH = 6,
  CRYSTAL_STATUS_INTERNAL = 7,
} CrystalStatus;

/**
 * A loaded model. Created by `crystal_model_load`, released by
 * `crystal_model_free`. Classification does not mutate the handle, so one
 * handle may be shared across threads.
 */
typedef struct CrystalModel CrystalModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *crystal_last_error(void);

/**
 * Library version as a static string.
 */
const char *crystal_version(void);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 * Caller contract: `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CrystalStatus crystal_model_load(const char *path, struct CrystalModel **out);

/**
 * Releases a handle. NULL is ignored.
 * Caller contract: `model` must come from `crystal_model_load` and not be used afterwards.
 */
void crystal_model_free(struct CrystalModel *model);

/**
 * Architecture name of a loaded model, valid while the handle lives.
 * Caller contract: `model` must be a live handle or NULL.
 */
const char *crystal_model_architecture(const struct CrystalModel *model);

/**
 * Trainable parameter count of a loaded model, 0 for NULL.
 * Caller contract: `model` must be a live handle or NULL.
 */
size_t crystal_model_param_count(const struct CrystalModel *model);

/**
 * Classifies one 128x128 grayscale image given row-major in [0, 1]. Writes
 * `CRYSTAL_NUM_CLASSES` softmax activations to `out`, indexed by label id.
 * Caller contract: `pixels` must hold `width * height` floats and `out` room for
 * `CRYSTAL_NUM_CLASSES` floats.
 */
enum CrystalStatus crystal_model_classify_gray(const struct CrystalModel *model,
                                               const float *pixels,
                                               size_t width,
                                               size_t height,
                                               float *out);

/**
 * Reads an image file, brings it to model resolution, and writes
 * `CRYSTAL_NUM_CLASSES` activations to `out`.
 * Caller contract: `path` must be a NUL-terminated string and `out` have room for
 * `CRYSTAL_NUM_CLASSES` floats.
 */
enum CrystalStatus crystal_model_classify_file(const struct CrystalModel *model,
                                               const char *path,
                                               float *out);

/**
 * Name of label `id`, or NULL when `id` is out of range.
 */
const char *crystal_label_name(size_t id);

/**
 * 1 for crystal labels, 0 for the others, -1 when `id` is out of range.
 */
int crystal_label_is_crystal(size_t id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRYSTAL_H */
