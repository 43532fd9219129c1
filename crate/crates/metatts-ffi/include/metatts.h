#ifndef METATTS_H
#define METATTS_H

/* Generated by cbindgen from metatts-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of a fallible call. Anything other than `Ok` leaves a
 * message retrievable via [`mtts_last_error`].
 */
typedef enum MttsStatus {
  MTTS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MTTS_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation (encoding, range, or shape).
   */
  MTTS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The destination buffer is smaller than the payload.
   */
  MTTS_STATUS_BUFFER_TOO_SMALL = 3,
  /**
   * The underlying operation failed; see `mtts_last_error`.
   */
  MTTS_STATUS_FAILURE = 4,
} MttsStatus;

/**
 * Training phase recorded in a checkpoint.
 */
typedef enum MttsPhase {
  MTTS_PHASE_THETA0 = 0,
  MTTS_PHASE_THETA_T = 1,
  MTTS_PHASE_THETA_M = 2,
  MTTS_PHASE_ADAPTED = 3,
} MttsPhase;

/**
 * Opaque checkpoint handle.
 */
typedef struct MttsCheckpoint MttsCheckpoint;

/**
 * Opaque synthesized-spectrogram handle (row-major frames × bins).
 */
typedef struct MttsMel MttsMel;

/**
 * Summary of a loaded checkpoint.
 */
typedef struct MttsCheckpointInfo {
  enum MttsPhase phase;
  /**
   * Training step at which the checkpoint was cut.
   */
  uint64_t step;
  size_t mel_bins;
  size_t alphabet;
  size_t style_dim;
  size_t train_speakers;
} MttsCheckpointInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message of the most recent failure on this thread, or null.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *mtts_last_error(void);

/**
 * Loads a checkpoint file into a heap-allocated handle.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer.
 */
enum MttsStatus mtts_checkpoint_load(const char *path, struct MttsCheckpoint **out);

/**
 * Releases a handle from [`mtts_checkpoint_load`]. Null is a no-op.
 *
 * # Safety
 * `ckpt` must be a pointer returned by `mtts_checkpoint_load` that has not
 * been freed already.
 */
void mtts_checkpoint_free(struct MttsCheckpoint *ckpt);

/**
 * Fills `out` with the checkpoint's phase, step, and dimensions.
 *
 * # Safety
 * `ckpt` must be a live handle and `out` writable.
 */
enum MttsStatus mtts_checkpoint_info(const struct MttsCheckpoint *ckpt,
                                     struct MttsCheckpointInfo *out);

/**
 * Synthesizes a mel spectrogram for a token sequence in inference mode
 * (predicted durations), conditioned on the checkpoint's speaker row 0 and
 * the prosody of `style_mel` (row-major `style_frames × style_bins`).
 *
 * # Safety
 * `tokens` must point to `n_tokens` elements, `style_mel` to
 * `style_frames * style_bins` doubles, and `out` to writable storage for
 * one pointer; a live `ckpt` handle is required.
 */
enum MttsStatus mtts_synthesize(const struct MttsCheckpoint *ckpt,
                                const uint16_t *tokens,
                                size_t n_tokens,
                                const double *style_mel,
                                size_t style_frames,
                                size_t style_bins,
                                struct MttsMel **out);

/**
 * Number of frames in a synthesized spectrogram (0 for null).
 *
 * # Safety
 * `mel` must be null or a live handle.
 */
size_t mtts_mel_frames(const struct MttsMel *mel);

/**
 * Number of mel bins per frame (0 for null).
 *
 * # Safety
 * `mel` must be null or a live handle.
 */
size_t mtts_mel_bins(const struct MttsMel *mel);

/**
 * Copies the spectrogram into `buf` row-major; `cap` is the buffer length
 * in doubles and must be at least frames × bins.
 *
 * # Safety
 * `mel` must be a live handle and `buf` must point to `cap` writable
 * doubles.
 */
enum MttsStatus mtts_mel_copy(const struct MttsMel *mel, double *buf, size_t cap);

/**
 * Releases a handle from [`mtts_synthesize`]. Null is a no-op.
 *
 * # Safety
 * `mel` must be a pointer returned by `mtts_synthesize` that has not been
 * freed already.
 */
void mtts_mel_free(struct MttsMel *mel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METATTS_H */
