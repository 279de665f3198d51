#ifndef LIPMEL_H
#define LIPMEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define LIPMEL_OK 0

#define LIPMEL_ERR_FAILURE 1

#define LIPMEL_ERR_CONFIG 2

#define LIPMEL_ERR_IO 3

#define LIPMEL_ERR_NON_FINITE 4

#define LIPMEL_ERR_MAX_STEPS 5

#define LIPMEL_ERR_GRADCHECK 6

/**
 * A NULL pointer, non-UTF-8 path or inconsistent buffer size.
 */
#define LIPMEL_ERR_INVALID_ARGUMENT 7

/**
 * The library panicked; the handle involved should be discarded.
 */
#define LIPMEL_ERR_PANIC 8

#define LIPMEL_STOP_PERIOD_DETECTED 0

#define LIPMEL_STOP_MAX_STEPS 1

#define LIPMEL_STOP_TARGET_LENGTH 2

/**
 * A loaded model with the preprocessing settings it was trained with.
 */
typedef struct LipmelModel LipmelModel;

/**
 * The result of one synthesis call.
 */
typedef struct LipmelSynthesis LipmelSynthesis;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lipmel_version(void);

/**
 * Message of the most recent failure on this thread, or NULL if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *lipmel_last_error(void);

/**
 * Loads a training checkpoint or a standalone model file.
 *
 * # Safety
 * `path` must be NULL or a NUL-terminated string; `out` must be NULL or
 * writable.
 */
int32_t lipmel_model_load(const char *path, struct LipmelModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`lipmel_model_load`] not yet freed.
 */
void lipmel_model_free(struct LipmelModel *model);

/**
 * Trainable parameter count, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t lipmel_model_num_parameters(const struct LipmelModel *model);

/**
 * Expected frame side length in pixels, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t lipmel_model_frame_size(const struct LipmelModel *model);

/**
 * Output waveform sample rate in Hz, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t lipmel_model_sample_rate(const struct LipmelModel *model);

/**
 * Synthesizes speech from a video container file. `gl_iters` of 0 uses
 * the default iteration count. Reaching the decoder step cap is not an
 * error; check [`lipmel_synthesis_stop_reason`].
 *
 * # Safety
 * `model` must be a live handle, `video_path` a NUL-terminated string and
 * `out` writable.
 */
int32_t lipmel_synthesize_file(const struct LipmelModel *model,
                               const char *video_path,
                               double fps,
                               size_t gl_iters,
                               uint64_t seed,
                               struct LipmelSynthesis **out);

/**
 * Synthesizes speech from raw 8-bit frames laid out as
 * `frames × height × width × channels`. The frames are cropped faces
 * without the end marker, which is appended internally.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must point to `len` readable
 * bytes and `out` must be writable.
 */
int32_t lipmel_synthesize_frames(const struct LipmelModel *model,
                                 const uint8_t *pixels,
                                 size_t len,
                                 size_t frames,
                                 size_t height,
                                 size_t width,
                                 size_t channels,
                                 double fps,
                                 size_t gl_iters,
                                 uint64_t seed,
                                 struct LipmelSynthesis **out);

/**
 * # Safety
 * `s` must be NULL or a synthesis handle not yet freed.
 */
void lipmel_synthesis_free(struct LipmelSynthesis *s);

/**
 * Waveform samples in `[-1, 1]`; the count goes to `len`. Valid while the
 * handle lives. NULL for a NULL handle.
 *
 * # Safety
 * `s` must be NULL or a live handle; `len` must be NULL or writable.
 */
const double *lipmel_synthesis_samples(const struct LipmelSynthesis *s, size_t *len);

/**
 * # Safety
 * `s` must be NULL or a live handle.
 */
uint32_t lipmel_synthesis_sample_rate(const struct LipmelSynthesis *s);

/**
 * Row-major log-mel frames, `frames × channels`.
 *
 * # Safety
 * `s` must be NULL or a live handle; `frames` and `channels` must be NULL
 * or writable.
 */
const double *lipmel_synthesis_mel(const struct LipmelSynthesis *s,
                                   size_t *frames,
                                   size_t *channels);

/**
 * Row-major attention weights, one row per decoder step and one column
 * per encoder position (video frames plus the end marker).
 *
 * # Safety
 * `s` must be NULL or a live handle; `rows` and `cols` must be NULL or
 * writable.
 */
const double *lipmel_synthesis_alignments(const struct LipmelSynthesis *s,
                                          size_t *rows,
                                          size_t *cols);

/**
 * One of the `LIPMEL_STOP_*` values, or -1 for NULL.
 *
 * # Safety
 * `s` must be NULL or a live handle.
 */
int32_t lipmel_synthesis_stop_reason(const struct LipmelSynthesis *s);

/**
 * Writes the waveform as 16-bit mono PCM.
 *
 * # Safety
 * `s` must be a live handle and `path` a NUL-terminated string.
 */
int32_t lipmel_synthesis_write_wav(const struct LipmelSynthesis *s, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIPMEL_H */
