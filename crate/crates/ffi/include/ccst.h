#ifndef CCST_H
#define CCST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcstStatus {
  CCST_STATUS_OK = 0,
  CCST_STATUS_NULL_POINTER = 1,
  CCST_STATUS_INVALID_ARGUMENT = 2,
  CCST_STATUS_IO = 3,
  CCST_STATUS_FORMAT = 4,
  CCST_STATUS_DIMENSION_MISMATCH = 5,
  CCST_STATUS_NUMERIC = 6,
  CCST_STATUS_PANIC = 7,
} CcstStatus;

// An HNSW graph together with the vectors it searches.
typedef struct CcstHnsw CcstHnsw;

// A trained compressor loaded from a checkpoint.
typedef struct CcstModel CcstModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *ccst_last_error(void);

// Library version as a static NUL-terminated string.
const char *ccst_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CcstStatus ccst_model_load(const char *path, struct CcstModel **out);

// # Safety
// `model` must come from `ccst_model_load` and not be used afterwards.
void ccst_model_free(struct CcstModel *model);

// # Safety
// All pointers must be valid.
enum CcstStatus ccst_model_dims(const struct CcstModel *model, size_t *d_in, size_t *d_out);

// Compresses `count` row-major vectors of width `d_in` into `output`,
// which must hold `count * d_out` floats.
//
// # Safety
// `input` and `output` must be valid for the stated sizes.
enum CcstStatus ccst_model_compress(const struct CcstModel *model,
                                    const float *input,
                                    size_t count,
                                    size_t dim,
                                    float *output);

// Builds an index over `count` row-major vectors of width `dim`.
//
// # Safety
// `vectors` must hold `count * dim` floats and `out` must be valid.
enum CcstStatus ccst_hnsw_build(const float *vectors,
                                size_t count,
                                size_t dim,
                                size_t m,
                                size_t ef_construction,
                                uint64_t seed,
                                struct CcstHnsw **out);

// Makes every later search compute distances against these id-aligned
// vectors, which may have any width.
//
// # Safety
// `vectors` must hold `count * dim` floats.
enum CcstStatus ccst_hnsw_attach_search_vectors(struct CcstHnsw *index,
                                                const float *vectors,
                                                size_t count,
                                                size_t dim);

// Up to `k` nearest ids and distances, ascending. `ids` and `distances`
// must hold `k` entries; `found` receives the number written.
//
// # Safety
// `query` must hold `dim` floats; output pointers must be valid.
enum CcstStatus ccst_hnsw_search(const struct CcstHnsw *index,
                                 const float *query,
                                 size_t dim,
                                 size_t k,
                                 size_t ef,
                                 uint32_t *ids,
                                 float *distances,
                                 size_t *found);

// # Safety
// `index` must be valid; `len` must be a valid pointer.
enum CcstStatus ccst_hnsw_len(const struct CcstHnsw *index, size_t *len);

// Writes the graph. The vectors are not stored; pass them again to
// `ccst_hnsw_load`.
//
// # Safety
// `path` must be a NUL-terminated string.
enum CcstStatus ccst_hnsw_save(const struct CcstHnsw *index, const char *path);

// # Safety
// `path` must be a NUL-terminated string, `vectors` must hold
// `count * dim` floats and `out` must be valid.
enum CcstStatus ccst_hnsw_load(const char *path,
                               const float *vectors,
                               size_t count,
                               size_t dim,
                               struct CcstHnsw **out);

// # Safety
// `index` must come from `ccst_hnsw_build` or `ccst_hnsw_load` and not be
// used afterwards.
void ccst_hnsw_free(struct CcstHnsw *index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCST_H */
