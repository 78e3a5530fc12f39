/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef EMBRANK_H
#define EMBRANK_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum EmbrankPrecision {
  EMBRANK_PRECISION_F32 = 0,
  EMBRANK_PRECISION_F64 = 1,
  EMBRANK_PRECISION_INT8 = 2,
  EMBRANK_PRECISION_BINARY = 3,
} EmbrankPrecision;

/**
 * Result code of every fallible call.
 */
typedef enum EmbrankStatus {
  EMBRANK_STATUS_OK = 0,
  EMBRANK_STATUS_NULL_POINTER = 1,
  EMBRANK_STATUS_INVALID_ARGUMENT = 2,
  EMBRANK_STATUS_DIM_MISMATCH = 3,
  EMBRANK_STATUS_ZERO_VECTOR = 4,
  EMBRANK_STATUS_NON_FINITE = 5,
  EMBRANK_STATUS_IO = 6,
  EMBRANK_STATUS_FORMAT = 7,
  EMBRANK_STATUS_PARSE = 8,
  EMBRANK_STATUS_DUPLICATE_ID = 9,
  EMBRANK_STATUS_DANGLING_ID = 10,
  EMBRANK_STATUS_EMPTY_INDEX = 11,
  EMBRANK_STATUS_BAD_DIM = 12,
  EMBRANK_STATUS_MANIFEST_MISMATCH = 13,
  EMBRANK_STATUS_PANIC = 14,
  EMBRANK_STATUS_OTHER = 15,
} EmbrankStatus;

/**
 * A built, immutable search index.
 */
typedef struct EmbrankIndex EmbrankIndex;

/**
 * An embedding matrix with string ids.
 */
typedef struct EmbrankMatrix EmbrankMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *embrank_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *embrank_version(void);

enum EmbrankStatus embrank_cosine_similarity(const double *a,
                                             const double *b,
                                             size_t dim,
                                             double *out);

/**
 * `sigmoid(logit_yes − logit_no)`.
 */
enum EmbrankStatus embrank_rerank_score(double logit_yes, double logit_no, double *out);

/**
 * Two-class cross-entropy at label yes (`label_yes`) or no.
 */
enum EmbrankStatus embrank_rerank_loss(bool label_yes,
                                       double logit_yes,
                                       double logit_no,
                                       double *out);

/**
 * Contrastive loss of `n` (query, positive) pairs of dimension `dim`.
 *
 * `negatives` holds `Σ negative_counts[i]` rows grouped by query; it may be
 * null when every count is zero. `stage2` drops the query–query and
 * document–document terms. Each gradient buffer may be null to skip it and
 * otherwise has the shape of its input.
 */
enum EmbrankStatus embrank_retrieval_infonce(const double *queries,
                                             const double *positives,
                                             size_t n,
                                             size_t dim,
                                             const double *negatives,
                                             const size_t *negative_counts,
                                             double temperature,
                                             bool stage2,
                                             double *out_value,
                                             double *grad_queries,
                                             double *grad_positives,
                                             double *grad_negatives);

/**
 * Weighted merge of `n_inputs` arrays of `len` doubles into `out`.
 */
enum EmbrankStatus embrank_merge(const double *const *inputs,
                                 size_t n_inputs,
                                 size_t len,
                                 const double *weights,
                                 double *out);

/**
 * Embedding-model input for a text instance. An empty instruction selects
 * the default. Returns null on error; free with `embrank_string_free`.
 */
char *embrank_render_embedding_template(const char *instruction, const char *text_part);

/**
 * Reranker input for text query and document. Returns null on error;
 * free with `embrank_string_free`.
 */
char *embrank_render_rerank_template(const char *instruction,
                                     const char *query,
                                     const char *document);

void embrank_string_free(char *s);

/**
 * Builds a matrix from `rows` ids and `rows × dim` values.
 */
enum EmbrankStatus embrank_matrix_new(const char *const *ids,
                                      const double *data,
                                      size_t rows,
                                      size_t dim,
                                      struct EmbrankMatrix **out);

/**
 * Loads an embedding file (any float or quantized dtype, dequantized).
 */
enum EmbrankStatus embrank_matrix_load(const char *path, struct EmbrankMatrix **out);

size_t embrank_matrix_rows(const struct EmbrankMatrix *m);

size_t embrank_matrix_dim(const struct EmbrankMatrix *m);

/**
 * Row-major values, valid for the lifetime of the handle.
 */
const double *embrank_matrix_data(const struct EmbrankMatrix *m);

void embrank_matrix_free(struct EmbrankMatrix *m);

/**
 * Builds an index over the first `dim` components of every row.
 */
enum EmbrankStatus embrank_index_build(const struct EmbrankMatrix *m,
                                       size_t dim,
                                       enum EmbrankPrecision precision,
                                       struct EmbrankIndex **out);

enum EmbrankStatus embrank_index_load(const char *path, struct EmbrankIndex **out);

enum EmbrankStatus embrank_index_save(const struct EmbrankIndex *idx, const char *path);

size_t embrank_index_len(const struct EmbrankIndex *idx);

/**
 * Payload bytes: vectors × bytes per vector.
 */
uint64_t embrank_index_storage_bytes(const struct EmbrankIndex *idx);

/**
 * Id of stored vector `pos`, valid for the lifetime of the handle; null if out of range.
 */
const char *embrank_index_id(const struct EmbrankIndex *idx, size_t pos);

/**
 * Exact top-`top_k` search. `query_dim` must be at least the index
 * dimension. Writes up to `top_k` positions and scores and the hit count.
 */
enum EmbrankStatus embrank_index_search(const struct EmbrankIndex *idx,
                                        const double *query,
                                        size_t query_dim,
                                        size_t top_k,
                                        size_t *out_positions,
                                        double *out_scores,
                                        size_t *out_count);

void embrank_index_free(struct EmbrankIndex *idx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMBRANK_H */
