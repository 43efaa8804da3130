#ifndef GUIDEMT_H
#define GUIDEMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GmtStatus {
  GMT_STATUS_OK = 0,
  GMT_STATUS_NULL_POINTER = 1,
  GMT_STATUS_INVALID_UTF8 = 2,
  GMT_STATUS_IO = 3,
  GMT_STATUS_INVALID = 4,
  /**
   * The output buffer is too small; the required size was written.
   */
  GMT_STATUS_BUFFER_TOO_SMALL = 5,
  GMT_STATUS_PANIC = 6,
} GmtStatus;

/**
 * Region features, an optional whole-image feature and region alignments.
 */
typedef struct GmtImage GmtImage;

/**
 * A loaded checkpoint with its vocabulary.
 */
typedef struct GmtModel GmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Short constant name of a status code.
 */
const char *gmt_status_name(enum GmtStatus status);

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len - 1` bytes) and returns the full message
 * length without the terminator.
 *
 * # Safety
 * `buf` must be NULL or point to `len` writable bytes.
 */
size_t gmt_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint written by `guidemt train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GmtStatus gmt_model_load(const char *path, struct GmtModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`gmt_model_load`] not yet freed.
 */
void gmt_model_free(struct GmtModel *model);

/**
 * Vocabulary size of the model, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t gmt_model_vocab_size(const struct GmtModel *model);

/**
 * Creates image features from a row-major `n_local x d_local` region
 * matrix and a `d_global` whole-image vector. `d_global = 0` means no
 * whole-image feature.
 *
 * # Safety
 * `local` must point to `n_local * d_local` values (or be NULL when that
 * is 0), `global` to `d_global` values, and `out` must be valid.
 */
enum GmtStatus gmt_image_new(const double *local,
                             size_t n_local,
                             size_t d_local,
                             const double *global,
                             size_t d_global,
                             struct GmtImage **out);

/**
 * Links source tokens `[token_start, token_end)` to region `box_index`.
 * The span is checked against the sentence when the image is used.
 *
 * # Safety
 * `image` must be a live handle.
 */
enum GmtStatus gmt_image_add_alignment(struct GmtImage *image,
                                       size_t token_start,
                                       size_t token_end,
                                       size_t box_index);

/**
 * # Safety
 * `image` must be NULL or a live handle.
 */
void gmt_image_free(struct GmtImage *image);

/**
 * Teacher-forced perplexity of `target` given `source` and `image`. A
 * NULL image scores with text only.
 *
 * # Safety
 * Strings must be NUL-terminated, handles live, `out_ppl` valid.
 */
enum GmtStatus gmt_perplexity(const struct GmtModel *model,
                              const char *source,
                              const struct GmtImage *image,
                              const char *target,
                              double *out_ppl);

/**
 * Greedy translation written to `buf` as a NUL-terminated string. The
 * length without terminator goes to `out_len` (if not NULL) even when the
 * buffer is too small.
 *
 * # Safety
 * Strings must be NUL-terminated, handles live, `buf` NULL or `buf_len`
 * writable bytes.
 */
enum GmtStatus gmt_translate(const struct GmtModel *model,
                             const char *source,
                             const struct GmtImage *image,
                             size_t max_len,
                             char *buf,
                             size_t buf_len,
                             size_t *out_len);

/**
 * Corpus BLEU in [0, 100] of `n` hypothesis/reference sentence pairs,
 * split on whitespace and punctuation. `add_one` nonzero smooths the
 * 2- to 4-gram precisions.
 *
 * # Safety
 * `hypotheses` and `references` must point to `n` NUL-terminated strings.
 */
enum GmtStatus gmt_bleu(const char *const *hypotheses,
                        const char *const *references,
                        size_t n,
                        int32_t add_one,
                        double *out_bleu);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUIDEMT_H */
