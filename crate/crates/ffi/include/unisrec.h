#ifndef UNISREC_H
#define UNISREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define UNISREC_OK 0

// A numeric check failed (degenerate vector, non-finite value).
#define UNISREC_ERR_NUMERIC 1

// Unreadable or malformed input file.
#define UNISREC_ERR_INPUT 2

// Shape or configuration mismatch.
#define UNISREC_ERR_CONFIG 3

// Empty input where data is required.
#define UNISREC_ERR_EMPTY 4

// A required pointer argument was null.
#define UNISREC_ERR_NULL 5

// Internal panic caught at the boundary.
#define UNISREC_ERR_PANIC 6

// Opaque handle to a loaded model.
typedef struct UnisrecModel UnisrecModel;

// Library version as a static NUL-terminated string.
const char *unisrec_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *unisrec_last_error(void);

// Loads a checkpoint written by `unisrec pretrain` or `unisrec finetune`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
int32_t unisrec_model_load(const char *path, struct UnisrecModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from [`unisrec_model_load`] and not be used afterwards.
void unisrec_model_free(struct UnisrecModel *model);

// Width of the text embeddings the model consumes; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t unisrec_model_input_dim(const struct UnisrecModel *model);

// Width of item and sequence representations; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t unisrec_model_output_dim(const struct UnisrecModel *model);

// Item representations of `n` text embeddings into `out` (`n × output_dim`).
//
// # Safety
// `rows` must hold `n × input_dim` floats and `out` room for `n × output_dim`.
int32_t unisrec_encode_items(const struct UnisrecModel *model,
                             const float *rows,
                             size_t n,
                             float *out);

// Unit-norm representation of a history of `len` items, oldest first,
// into `out` (`output_dim` floats). Only the last `n_max` items are used.
//
// # Safety
// `history` must hold `len × input_dim` floats and `out` room for `output_dim`.
int32_t unisrec_encode_sequence(const struct UnisrecModel *model,
                                const float *history,
                                size_t len,
                                float *out);

// Inductive next-item scores `s · v` of `n_candidates` candidate text
// embeddings given a history of `len` items. Any ID table in the
// checkpoint is ignored.
//
// # Safety
// `history` must hold `len × input_dim` floats, `candidates`
// `n_candidates × input_dim` floats and `out` room for `n_candidates`.
int32_t unisrec_score(const struct UnisrecModel *model,
                      const float *history,
                      size_t len,
                      const float *candidates,
                      size_t n_candidates,
                      float *out);

#endif  /* UNISREC_H */
