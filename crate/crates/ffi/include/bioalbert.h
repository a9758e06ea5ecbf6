#ifndef BIOALBERT_H
#define BIOALBERT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BaStatus {
  BA_STATUS_OK = 0,
  BA_STATUS_NULL_POINTER = 1,
  BA_STATUS_INVALID_ARGUMENT = 2,
  BA_STATUS_IO = 3,
  BA_STATUS_FORMAT = 4,
  BA_STATUS_SHAPE_MISMATCH = 5,
  BA_STATUS_NUMERIC = 6,
  BA_STATUS_BUFFER_TOO_SMALL = 7,
  BA_STATUS_PANIC = 8,
} BaStatus;

/**
 * Model weights and configuration, read-only after loading.
 */
typedef struct BaModel BaModel;

/**
 * Tokenizer vocabulary handle.
 */
typedef struct BaVocab BaVocab;

typedef struct BaModelConfig {
  size_t vocab_size;
  size_t embedding_size;
  size_t hidden_size;
  size_t num_layers;
  size_t num_heads;
  size_t ffn_size;
  size_t max_positions;
  size_t type_vocab_size;
  float dropout;
  float layer_norm_eps;
} BaModelConfig;

/**
 * Entity mention: words `start..end` of sentence `sentence`.
 */
typedef struct BaSpan {
  size_t sentence;
  const char *label;
  size_t start;
  size_t end;
} BaSpan;

typedef struct BaPrf {
  double precision;
  double recall;
  double f1;
} BaPrf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ba_last_error(void);

/**
 * Library version as a static string.
 */
const char *ba_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ba_string_free(char *s);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BaStatus ba_vocab_load(const char *path, struct BaVocab **out);

/**
 * Number of pieces, or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
size_t ba_vocab_size(const struct BaVocab *vocab);

/**
 * Encodes `text`. `*len` receives the number of ids; when it exceeds
 * `capacity` nothing is written and `BA_STATUS_BUFFER_TOO_SMALL` is
 * returned, so a first call with `capacity = 0` sizes the buffer.
 *
 * # Safety
 * `ids` must have room for `capacity` values.
 */
enum BaStatus ba_vocab_encode(const struct BaVocab *vocab,
                              const char *text,
                              uint32_t *ids,
                              size_t capacity,
                              size_t *len);

/**
 * Decodes ids into a new string released with [`ba_string_free`].
 *
 * # Safety
 * `ids` must hold `n` values and `out` be writable.
 */
enum BaStatus ba_vocab_decode(const struct BaVocab *vocab,
                              const uint32_t *ids,
                              size_t n,
                              char **out);

/**
 * # Safety
 * `vocab` must be null or a handle not yet freed.
 */
void ba_vocab_free(struct BaVocab *vocab);

/**
 * Loads weights from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BaStatus ba_model_load(const char *path, struct BaModel **out);

/**
 * Freshly initialised weights for `config`.
 *
 * # Safety
 * `config` must be readable and `out` writable.
 */
enum BaStatus ba_model_init(const struct BaModelConfig *config,
                            uint64_t seed,
                            struct BaModel **out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum BaStatus ba_model_config(const struct BaModel *model, struct BaModelConfig *out);

/**
 * Encodes one unpadded sequence. `segment_ids` may be null (all zero).
 * `sequence_out` receives `n * hidden_size` floats and `pooled_out`
 * `hidden_size` floats; either may be null.
 *
 * # Safety
 * Buffers must match the sizes above.
 */
enum BaStatus ba_model_forward(const struct BaModel *model,
                               const uint32_t *ids,
                               const uint8_t *segment_ids,
                               size_t n,
                               float *sequence_out,
                               float *pooled_out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ba_model_free(struct BaModel *model);

/**
 * Trainable parameter count of the encoder with its pretraining heads.
 *
 * # Safety
 * `config` must be readable and `out` writable.
 */
enum BaStatus ba_count_parameters(const struct BaModelConfig *config, uint64_t *out);

/**
 * Learning rate at 1-based `step` of the linear warmup/decay schedule.
 *
 * # Safety
 * `out` must be writable.
 */
enum BaStatus ba_lr_at(uint64_t step,
                       double peak_lr,
                       uint64_t warmup_steps,
                       uint64_t total_steps,
                       double *out);

/**
 * # Safety
 * `x` and `y` must hold `n` values; `out` must be writable.
 */
enum BaStatus ba_pearson(const double *x, const double *y, size_t n, double *out);

/**
 * Exact-match entity precision, recall and F1 over `n_sentences`
 * sentences.
 *
 * # Safety
 * Span arrays must hold the given counts with valid label strings.
 */
enum BaStatus ba_entity_f1(const struct BaSpan *gold,
                           size_t n_gold,
                           const struct BaSpan *pred,
                           size_t n_pred,
                           size_t n_sentences,
                           struct BaPrf *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIOALBERT_H */
