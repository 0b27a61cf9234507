#ifndef MTD_H
#define MTD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. 1 to 3 match the `mtd` command-line exit codes.
 */
typedef enum MtdStatus {
  MTD_STATUS_OK = 0,
  /**
   * Bad argument or configuration value.
   */
  MTD_STATUS_USAGE = 1,
  /**
   * Unreadable, malformed or mismatched data.
   */
  MTD_STATUS_DATA = 2,
  /**
   * Non-finite values.
   */
  MTD_STATUS_NUMERICAL = 3,
  /**
   * A required pointer was null.
   */
  MTD_STATUS_NULL_POINTER = 4,
  /**
   * Rust panic caught at the boundary.
   */
  MTD_STATUS_PANIC = 5,
} MtdStatus;

/**
 * Which split of a corpus.
 */
typedef enum MtdSplit {
  MTD_SPLIT_TRAIN = 0,
  MTD_SPLIT_VAL = 1,
  MTD_SPLIT_TEST = 2,
} MtdSplit;

/**
 * Which built-in model profile [`mtd_model_init`] uses.
 */
typedef enum MtdProfile {
  MTD_PROFILE_TEACHER = 0,
  MTD_PROFILE_STUDENT = 1,
  MTD_PROFILE_FULL_TEACHER = 2,
  MTD_PROFILE_FULL_STUDENT = 3,
} MtdProfile;

/**
 * Opaque corpus handle.
 */
typedef struct MtdCorpus MtdCorpus;

/**
 * Opaque model handle.
 */
typedef struct MtdModel MtdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next `mtd_*` call on this thread.
 */
const char *mtd_last_error(void);

/**
 * Generates a corpus. `config_text` holds `key = value` lines (only the
 * `corpus.*` keys matter); NULL or "" means the defaults.
 *
 * # Safety
 * `config_text` is NULL or a NUL-terminated string; `out` is writable.
 */
enum MtdStatus mtd_corpus_generate(const char *config_text, struct MtdCorpus **out_corpus);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out_corpus` is writable.
 */
enum MtdStatus mtd_corpus_load(const char *path, struct MtdCorpus **out_corpus);

/**
 * # Safety
 * `corpus` is a live handle; `path` is a NUL-terminated string.
 */
enum MtdStatus mtd_corpus_save(const struct MtdCorpus *corpus, const char *path);

/**
 * Number of utterances in a split.
 *
 * # Safety
 * `corpus` is a live handle; `out_len` is writable.
 */
enum MtdStatus mtd_corpus_len(const struct MtdCorpus *corpus, enum MtdSplit split, size_t *out_len);

/**
 * # Safety
 * `corpus` is NULL or a handle not yet freed.
 */
void mtd_corpus_free(struct MtdCorpus *corpus);

/**
 * Freshly initialised model from a built-in profile with the given seed.
 *
 * # Safety
 * `out_model` is writable.
 */
enum MtdStatus mtd_model_init(enum MtdProfile profile, uint64_t seed, struct MtdModel **out_model);

/**
 * Loads a checkpoint written by `mtd train-teacher` or `mtd distill`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out_model` is writable.
 */
enum MtdStatus mtd_model_load(const char *path, struct MtdModel **out_model);

/**
 * # Safety
 * `model` is NULL or a handle not yet freed.
 */
void mtd_model_free(struct MtdModel *model);

/**
 * Parameter count; with `backend_only` the audio/visual front-ends are
 * excluded.
 *
 * # Safety
 * `model` is a live handle; `out_count` is writable.
 */
enum MtdStatus mtd_model_param_count(const struct MtdModel *model,
                                     bool backend_only,
                                     size_t *out_count);

/**
 * Input widths and audio rate of a model, any of which may be NULL.
 *
 * # Safety
 * `model` is a live handle; non-null outputs are writable.
 */
enum MtdStatus mtd_model_dims(const struct MtdModel *model,
                              size_t *out_d_visual,
                              size_t *out_d_audio,
                              size_t *out_audio_rate);

/**
 * Sync logit for row-major `visual_frames × d_visual` and
 * `(audio_rate·visual_frames) × d_audio` feature arrays.
 *
 * # Safety
 * `visual` and `audio` point to that many `double`s; `out_logit` is
 * writable.
 */
enum MtdStatus mtd_model_score(const struct MtdModel *model,
                               const double *visual,
                               size_t visual_frames,
                               const double *audio,
                               size_t audio_frames,
                               double *out_logit);

/**
 * Retrieval accuracy on the test split at one frame length, with default
 * evaluation settings (±15 frames, tolerance 1, 500 queries).
 *
 * # Safety
 * Handles are live; `out_accuracy` is writable.
 */
enum MtdStatus mtd_evaluate(const struct MtdModel *model,
                            const struct MtdCorpus *corpus,
                            size_t frame_length,
                            double *out_accuracy);

/**
 * Learning rate at `epoch` under the default schedule.
 *
 * # Safety
 * `out_lr` is writable.
 */
enum MtdStatus mtd_lr_schedule(size_t epoch, double *out_lr);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mtd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTD_H */
