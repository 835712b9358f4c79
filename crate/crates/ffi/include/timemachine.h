#ifndef TIMEMACHINE_H
#define TIMEMACHINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TmStatus {
  TM_STATUS_OK = 0,
  TM_STATUS_NULL_POINTER = 1,
  TM_STATUS_INVALID_ARGUMENT = 2,
  TM_STATUS_CHECKPOINT = 3,
  TM_STATUS_SHAPE = 4,
  TM_STATUS_NUMERICAL = 5,
  TM_STATUS_PANIC = 6,
} TmStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct TmModel TmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 * The handle must be released with [`tm_model_free`].
 */
enum TmStatus tm_model_load(const char *path, struct TmModel **out);

/**
 * Releases a handle from [`tm_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tm_model_free(struct TmModel *model);

/**
 * Writes the channel count, look-back length and horizon of the model.
 *
 * # Safety
 * `model` must be a live handle; the output pointers must be valid.
 */
enum TmStatus tm_model_dims(const struct TmModel *model,
                            size_t *channels,
                            size_t *lookback,
                            size_t *horizon);

/**
 * Number of trainable scalars in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum TmStatus tm_model_num_params(const struct TmModel *model, size_t *out);

/**
 * Forecasts `batch` windows.
 *
 * `input` holds `batch * channels * lookback` values laid out as
 * `[batch][channel][time]`; `output` receives `batch * channels * horizon`
 * values in the same layout and `output_len` must equal that count.
 *
 * # Safety
 * `input` and `output` must point to buffers of the stated lengths.
 */
enum TmStatus tm_model_predict(const struct TmModel *model,
                               const double *input,
                               size_t batch,
                               double *output,
                               size_t output_len);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`) and returns the length the full message needs,
 * including the terminator. Pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t tm_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIMEMACHINE_H */
