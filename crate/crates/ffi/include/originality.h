#ifndef ORIGINALITY_H
#define ORIGINALITY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ORIG_STATUS_OK = 0,
  ORIG_STATUS_NULL_POINTER = 1,
  ORIG_STATUS_INVALID_ARGUMENT = 2,
  ORIG_STATUS_DOMAIN = 3,
  ORIG_STATUS_CONTRACT = 4,
  ORIG_STATUS_TRANSPORT = 5,
  ORIG_STATUS_TIMEOUT = 6,
  ORIG_STATUS_STATUS = 7,
  ORIG_STATUS_PROTOCOL = 8,
  ORIG_STATUS_FORMAT = 9,
  ORIG_STATUS_STATE = 10,
  ORIG_STATUS_STORAGE = 11,
  ORIG_STATUS_BUFFER_TOO_SMALL = 12,
  ORIG_STATUS_PANIC = 13,
} OrigStatus;

/**
 * A sample source: synthetic distribution or embedding corpus.
 */
typedef struct OrigBackend OrigBackend;

/**
 * A batch of embeddings of equal dimension.
 */
typedef struct OrigBatch OrigBatch;

/**
 * Summary of `m` repeated estimates. `std` is the population standard deviation.
 */
typedef struct {
  double mean;
  double std;
  size_t m;
  size_t n;
  bool degenerate;
} OrigSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *orig_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *orig_version(void);

/**
 * Synthetic backend from a JSON definition file.
 */
OrigStatus orig_backend_synthetic_open(const char *path, OrigBackend **out);

/**
 * Synthetic backend of a built-in validation scenario.
 */
OrigStatus orig_backend_scenario(const char *name, uint64_t seed, OrigBackend **out);

/**
 * Backend that resamples an embedding file (one JSON record per line).
 */
OrigStatus orig_backend_corpus_open(const char *path, OrigBackend **out);

void orig_backend_free(OrigBackend *backend);

/**
 * Embedding dimension of the backend's samples.
 */
OrigStatus orig_backend_dim(const OrigBackend *backend, size_t *dim);

/**
 * Copies a named reference vector (synthetic: configured references;
 * corpus: item ids) into `values`. `dim` receives the required length even
 * when the buffer is too small.
 */
OrigStatus orig_backend_reference(const OrigBackend *backend,
                                  const char *label,
                                  double *values,
                                  size_t capacity,
                                  size_t *dim);

/**
 * Draws `count` samples for `prompt`.
 */
OrigStatus orig_generate(const OrigBackend *backend,
                         const char *prompt,
                         uint64_t seed,
                         size_t count,
                         OrigBatch **out);

/**
 * Batch from `n * dim` row-major values.
 */
OrigStatus orig_batch_from_values(const double *values, size_t n, size_t dim, OrigBatch **out);

void orig_batch_free(OrigBatch *batch);

OrigStatus orig_batch_shape(const OrigBatch *batch, size_t *n, size_t *dim);

/**
 * Copies the batch into `values` row-major; `capacity` is in doubles.
 */
OrigStatus orig_batch_values(const OrigBatch *batch, double *values, size_t capacity);

/**
 * `1 - cos(a, b)`; fails with `ORIG_STATUS_DOMAIN` on a zero vector.
 */
OrigStatus orig_cosine_distance(const double *a, const double *b, size_t dim, double *out);

/**
 * Mean cosine distance from `reference` to the batch. `standard_error`
 * (optional) receives the standard error, or NaN when the batch has one sample.
 */
OrigStatus orig_estimate(const double *reference,
                         size_t dim,
                         const OrigBatch *batch,
                         double *value,
                         double *standard_error_out);

/**
 * Index of the batch's most generic sample (lowest index on ties) and its
 * mean distance to the others.
 */
OrigStatus orig_select_generic(const OrigBatch *batch, size_t *index, double *cross_mean_distance);

/**
 * `m` independent estimates of `n` samples each for `prompt`.
 */
OrigStatus orig_repeated_estimates(const OrigBackend *backend,
                                   const char *prompt,
                                   const double *reference,
                                   size_t dim,
                                   uint64_t seed,
                                   size_t n,
                                   size_t m,
                                   size_t parallelism,
                                   OrigSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORIGINALITY_H */
