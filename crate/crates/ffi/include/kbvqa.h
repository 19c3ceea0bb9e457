#ifndef KBVQA_H
#define KBVQA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Routing verdict of an inspector reply.
 */
typedef enum KbvqaDecision {
  KBVQA_DECISION_PASS = 0,
  KBVQA_DECISION_FAIL = 1,
} KbvqaDecision;

typedef enum KbvqaStatus {
  KBVQA_STATUS_OK = 0,
  KBVQA_STATUS_NULL_POINTER = 1,
  KBVQA_STATUS_INVALID_ARGUMENT = 2,
  KBVQA_STATUS_INVALID_UTF8 = 3,
  KBVQA_STATUS_IO = 4,
  KBVQA_STATUS_DIMENSION_MISMATCH = 5,
  KBVQA_STATUS_DUPLICATE_ID = 6,
  KBVQA_STATUS_CORRUPT_INDEX = 7,
  KBVQA_STATUS_VERSION_MISMATCH = 8,
  KBVQA_STATUS_EMPTY_INDEX = 9,
  KBVQA_STATUS_PANIC = 99,
} KbvqaStatus;

/**
 * Opaque index handle.
 */
typedef struct KbvqaIndex KbvqaIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t kbvqa_last_error(char *buf, size_t len);

/**
 * Loads an index file written by `kbvqa build-kb`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KbvqaStatus kbvqa_index_load(const char *path, struct KbvqaIndex **out);

/**
 * Builds a sealed index from `count` row-major vectors of length `dim`.
 * Entry metadata is left empty.
 *
 * # Safety
 * `ids` must hold `count` values and `vectors` `count * dim` values.
 */
enum KbvqaStatus kbvqa_index_build(size_t dim,
                                   const uint64_t *ids,
                                   const double *vectors,
                                   size_t count,
                                   struct KbvqaIndex **out);

/**
 * # Safety
 * `index` must come from this library; `path` must be NUL-terminated.
 */
enum KbvqaStatus kbvqa_index_save(const struct KbvqaIndex *index, const char *path);

/**
 * Releases an index. Null is ignored.
 *
 * # Safety
 * `index` must come from this library and not be used afterwards.
 */
void kbvqa_index_free(struct KbvqaIndex *index);

/**
 * Number of entries; 0 for a null handle.
 *
 * # Safety
 * `index` must be null or come from this library.
 */
size_t kbvqa_index_len(const struct KbvqaIndex *index);

/**
 * Vector dimension; 0 for a null handle.
 *
 * # Safety
 * `index` must be null or come from this library.
 */
size_t kbvqa_index_dim(const struct KbvqaIndex *index);

/**
 * Exact cosine top-`k`. Writes up to `k` results to `out_ids` and
 * `out_scores` and the number written to `out_len`.
 *
 * # Safety
 * `query` must hold `dim` values; `out_ids` and `out_scores` must have room
 * for `k` values; `out_len` must be writable.
 */
enum KbvqaStatus kbvqa_index_search(const struct KbvqaIndex *index,
                                    const double *query,
                                    size_t dim,
                                    size_t k,
                                    uint64_t *out_ids,
                                    double *out_scores,
                                    size_t *out_len);

/**
 * Retrieval reward for a 1-based hit rank; `rank == 0` means no hit.
 *
 * # Safety
 * `out` must be writable.
 */
enum KbvqaStatus kbvqa_retrieval_reward(size_t rank, double *out);

/**
 * Format reward of a raw refiner reply.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be writable.
 */
enum KbvqaStatus kbvqa_format_reward(const char *text, double *out);

/**
 * Group-normalized advantages of `n` rewards, written to `out`.
 *
 * # Safety
 * `rewards` and `out` must each hold `n` values.
 */
enum KbvqaStatus kbvqa_compute_advantages(const double *rewards, size_t n, double *out);

/**
 * Parses an inspector reply. `out_parse_ok` is false for unusable replies,
 * which the router sends to the fallback path.
 *
 * # Safety
 * `text` must be NUL-terminated; outputs must be writable.
 */
enum KbvqaStatus kbvqa_parse_inspection(const char *text,
                                        enum KbvqaDecision *out_decision,
                                        bool *out_parse_ok);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KBVQA_H */
