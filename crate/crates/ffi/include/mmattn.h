#ifndef MMATTN_H
#define MMATTN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum MmStatus {
  MM_STATUS_OK = 0,
  MM_STATUS_NULL_POINTER = 1,
  MM_STATUS_INVALID_UTF8 = 2,
  MM_STATUS_IO = 3,
  MM_STATUS_BAD_FORMAT = 4,
  MM_STATUS_INVALID_ARGUMENT = 5,
  MM_STATUS_SHAPE = 6,
  MM_STATUS_INTERNAL = 7,
} MmStatus;

// Opaque handle to a loaded model and its vocabularies.
typedef struct MmModel MmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint together with its `.src.vocab` / `.tgt.vocab` files.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MmStatus mm_model_load(const char *path, struct MmModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`mm_model_load`] and not be freed twice.
void mm_model_free(struct MmModel *model);

// Image feature geometry expected by the model: width per location, or 0
// for text-only models.
//
// # Safety
// `model` must be a live handle or null.
size_t mm_model_feature_dim(const struct MmModel *model);

// Greedy-translates a whitespace-tokenized sentence.
//
// `features` holds `locations × dim` row-major floats and may be null for
// text-only models. `max_len == 0` uses twice the source length plus 5.
// On success `*out` receives a string to free with [`mm_string_free`].
//
// # Safety
// Pointers must be valid for the stated sizes.
enum MmStatus mm_translate(const struct MmModel *model,
                           const char *sentence,
                           const float *features,
                           size_t locations,
                           size_t dim,
                           size_t max_len,
                           char **out);

// Corpus BLEU-4 (0–100) of `n` hypotheses against `n` references.
//
// # Safety
// `hyps` and `refs` must each point to `n` NUL-terminated strings.
enum MmStatus mm_corpus_bleu(const char *const *hyps,
                             const char *const *refs,
                             size_t n,
                             double *out);

// Releases a string returned by the library; null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void mm_string_free(char *s);

// Message for the last failed call on this thread; empty after success.
// Valid until the next library call on the same thread.
const char *mm_last_error(void);

// Library version as a static string.
const char *mm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMATTN_H */
