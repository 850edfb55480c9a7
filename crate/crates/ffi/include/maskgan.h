#ifndef MASKGAN_H
#define MASKGAN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Direction code: images to masks.
 */
#define MASKGAN_DIRECTION_A_TO_B 0

/**
 * Direction code: masks to images (cycle-consistent checkpoints only).
 */
#define MASKGAN_DIRECTION_B_TO_A 1

/**
 * Result codes shared by every entry point.
 */
typedef enum MaskganStatus {
  MASKGAN_STATUS_OK = 0,
  MASKGAN_STATUS_NULL_POINTER = 1,
  MASKGAN_STATUS_INVALID_ARGUMENT = 2,
  MASKGAN_STATUS_IO = 3,
  MASKGAN_STATUS_CORRUPT_CHECKPOINT = 4,
  MASKGAN_STATUS_UNSUPPORTED_VERSION = 5,
  MASKGAN_STATUS_TASK_MISMATCH = 6,
  MASKGAN_STATUS_COMPUTE_FAILED = 7,
  MASKGAN_STATUS_PANIC = 8,
} MaskganStatus;

/**
 * A generator loaded from a checkpoint, fixed to one direction.
 */
typedef struct MaskganGenerator MaskganGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next call into this library from the same thread.
 */
const char *maskgan_last_error_message(void);

/**
 * Loads a checkpoint and selects the generator for `direction`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MaskganStatus maskgan_generator_load(const char *path,
                                          uint32_t direction,
                                          struct MaskganGenerator **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `handle` must come from [`maskgan_generator_load`] and not be freed twice.
 */
void maskgan_generator_free(struct MaskganGenerator *handle);

/**
 * Writes the square input size and the input/output channel counts.
 *
 * # Safety
 * `handle` must be live; the out pointers must be writable.
 */
enum MaskganStatus maskgan_generator_shape(const struct MaskganGenerator *handle,
                                           size_t *image_size,
                                           size_t *in_channels,
                                           size_t *out_channels);

/**
 * Runs one forward pass in inference mode. `input` holds `C_in * S * S`
 * values in `[-1, 1]`, channel-major; `output` receives `C_out * S * S`
 * values of the tanh map.
 *
 * # Safety
 * `handle` must be live; `input`/`output` must hold the stated lengths.
 */
enum MaskganStatus maskgan_generator_run(const struct MaskganGenerator *handle,
                                         const float *input,
                                         size_t input_len,
                                         float *output,
                                         size_t output_len);

/**
 * Binarizes both maps at `threshold` (strictly greater is foreground) and
 * writes intersection-over-union, Dice and pixel accuracy.
 *
 * # Safety
 * `pred` and `target` must hold `len` floats; out pointers must be writable.
 */
enum MaskganStatus maskgan_mask_metrics(const float *pred,
                                        const float *target,
                                        size_t len,
                                        float threshold,
                                        double *iou,
                                        double *dice,
                                        double *accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKGAN_H */
