#ifndef DEPTHPOLYP_H
#define DEPTHPOLYP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_POINTER = 1,
  DP_STATUS_INVALID_ARGUMENT = 2,
  DP_STATUS_CONFIG = 3,
  DP_STATUS_DATA = 4,
  DP_STATUS_IO = 5,
  DP_STATUS_FORMAT = 6,
  DP_STATUS_TRAINING = 7,
  DP_STATUS_INTERNAL = 8,
  DP_STATUS_PANIC = 9,
} DpStatus;

/**
 * A model and its weights.
 */
typedef struct DpModel DpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a freshly initialized model with the default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to a `DpModel *`.
 */
DpStatus dp_model_new_default(uint64_t seed, DpModel **out);

/**
 * Loads a checkpoint written by the library or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
DpStatus dp_model_load(const char *path, DpModel **out);

/**
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
DpStatus dp_model_save(const DpModel *model, const char *path);

/**
 * Frees a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void dp_model_free(DpModel *model);

/**
 * Configured input height and width.
 *
 * # Safety
 * All pointers must be valid.
 */
DpStatus dp_model_input_size(const DpModel *model, size_t *height, size_t *width);

/**
 * Learnable scalar count and multiply-adds for one `height × width` image.
 *
 * # Safety
 * All pointers must be valid.
 */
DpStatus dp_model_costs(const DpModel *model,
                        size_t height,
                        size_t width,
                        uint64_t *params,
                        uint64_t *macs);

/**
 * Runs one image. `image` holds `3·height·width` floats in `[0, 1]`,
 * channel-major (all red, then green, then blue). `prob` and `depth` receive
 * `height·width` floats each; either may be null. Both sides must be
 * multiples of 32.
 *
 * # Safety
 * Buffers must hold the stated number of floats.
 */
DpStatus dp_model_predict(const DpModel *model,
                          const float *image,
                          size_t height,
                          size_t width,
                          float *prob,
                          float *depth);

/**
 * Dice, IoU and Recall of `pred` (probabilities) against a `{0, 1}` mask.
 *
 * # Safety
 * `pred` and `mask` must hold `n` floats; `out` must hold 3 doubles.
 */
DpStatus dp_score(const float *pred, const float *mask, size_t n, double threshold, double *out);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must hold `len` bytes, or be null with `len == 0`.
 */
size_t dp_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHPOLYP_H */
