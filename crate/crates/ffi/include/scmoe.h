#ifndef SCMOE_H
#define SCMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScmoeStatus {
  SCMOE_STATUS_OK = 0,
  SCMOE_STATUS_NULL_POINTER = 1,
  SCMOE_STATUS_INVALID_ARGUMENT = 2,
  SCMOE_STATUS_CONFIG = 3,
  SCMOE_STATUS_DATA = 4,
  SCMOE_STATUS_NUMERIC = 5,
  SCMOE_STATUS_CHECKPOINT = 6,
  SCMOE_STATUS_IO = 7,
  SCMOE_STATUS_BUFFER_TOO_SMALL = 8,
  SCMOE_STATUS_FINISHED = 9,
  SCMOE_STATUS_PANIC = 10,
} ScmoeStatus;

/**
 * A loaded model; shareable between streams.
 */
typedef struct ScmoeModel ScmoeModel;

/**
 * One streaming session.
 */
typedef struct ScmoeStream ScmoeStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *scmoe_last_error(void);

/**
 * Loads a checkpoint file.
 */
enum ScmoeStatus scmoe_model_load(const char *path, struct ScmoeModel **out);

/**
 * Builds an untrained model from a JSON model config (null: defaults).
 */
enum ScmoeStatus scmoe_model_new(const char *config_json, uint64_t seed, struct ScmoeModel **out);

void scmoe_model_free(struct ScmoeModel *model);

/**
 * Feature dimension and vocabulary size the model expects.
 */
enum ScmoeStatus scmoe_model_dims(const struct ScmoeModel *model,
                                  size_t *feat_dim,
                                  size_t *vocab_size);

/**
 * Total parameters and parameters activated per frame.
 */
enum ScmoeStatus scmoe_model_count_parameters(const struct ScmoeModel *model,
                                              uint64_t *total,
                                              uint64_t *activated);

/**
 * Two-pass decode of row-major `features` (`frames × feat_dim`) with the
 * decoding weights (lambda 0.3, alpha 0.6).
 */
enum ScmoeStatus scmoe_decode(const struct ScmoeModel *model,
                              const double *features,
                              size_t frames,
                              size_t feat_dim,
                              int64_t chunk_size,
                              int64_t left_chunks,
                              size_t beam,
                              size_t *tokens_out,
                              size_t capacity,
                              size_t *len_out,
                              double *score_out);

/**
 * Opens a streaming session on `model` (the model handle may be freed afterwards).
 */
enum ScmoeStatus scmoe_stream_new(const struct ScmoeModel *model,
                                  int64_t chunk_size,
                                  int64_t left_chunks,
                                  size_t beam,
                                  struct ScmoeStream **out);

/**
 * Appends frames; `new_partials` receives how many chunks they completed.
 */
enum ScmoeStatus scmoe_stream_push(struct ScmoeStream *stream,
                                   const double *features,
                                   size_t frames,
                                   size_t feat_dim,
                                   size_t *new_partials);

/**
 * Latest partial transcript and its 1-based chunk index (0 before the first chunk).
 */
enum ScmoeStatus scmoe_stream_partial(struct ScmoeStream *stream,
                                      size_t *tokens_out,
                                      size_t capacity,
                                      size_t *len_out,
                                      size_t *chunk_out);

/**
 * Ends the stream and writes the rescored transcript. The handle stays
 * valid (for `_free`) but accepts no more frames.
 */
enum ScmoeStatus scmoe_stream_finish(struct ScmoeStream *stream,
                                     size_t *tokens_out,
                                     size_t capacity,
                                     size_t *len_out,
                                     double *score_out);

void scmoe_stream_free(struct ScmoeStream *stream);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCMOE_H */
