#ifndef KDLAB_H
#define KDLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every `kd_*` call. Zero is success.
 */
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KD_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  KD_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad token ids, vocabulary, order or length bound.
   */
  KD_STATUS_INVALID_ARGUMENT = 3,
  KD_STATUS_IO = 4,
  /**
   * Model JSON could not be parsed or failed validation.
   */
  KD_STATUS_PARSE = 5,
  /**
   * Two models do not share a vocabulary.
   */
  KD_STATUS_MISMATCH = 6,
  KD_STATUS_NON_FINITE = 7,
  /**
   * The output buffer is shorter than the vocabulary.
   */
  KD_STATUS_BUFFER_TOO_SMALL = 8,
  KD_STATUS_PANIC = 9,
  KD_STATUS_INTERNAL = 10,
} KdStatus;

/**
 * Opaque model handle.
 */
typedef struct KdModel KdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer is valid until the next `kd_*` call on the same thread.
 */
const char *kd_last_error(void);

/**
 * Loads a model JSON file. On success `*out` holds a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KdStatus kd_model_load(const char *path, struct KdModel **out);

/**
 * Parses a model from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KdStatus kd_model_from_json(const char *json, struct KdModel **out);

/**
 * Builds a uniform model of the given order over `vocab_size` tokens with
 * `eos` as the end-of-sequence id.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum KdStatus kd_model_uniform(size_t vocab_size, uint32_t eos, size_t order, struct KdModel **out);

/**
 * Writes the model as JSON to `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum KdStatus kd_model_save(const struct KdModel *model, const char *path);

/**
 * Releases a handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void kd_model_free(struct KdModel *model);

/**
 * Vocabulary size, EOS id and context order of a model.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum KdStatus kd_model_shape(const struct KdModel *model,
                             size_t *vocab_size,
                             uint32_t *eos,
                             size_t *order);

/**
 * Next-token distribution after `context` (prompt followed by any response
 * prefix). Writes `vocab_size` probabilities into `probs`.
 *
 * # Safety
 * `context` must point to `context_len` ids (may be null when zero) and
 * `probs` to `probs_len` writable doubles.
 */
enum KdStatus kd_model_next_token_dist(const struct KdModel *model,
                                       const uint32_t *context,
                                       size_t context_len,
                                       double *probs,
                                       size_t probs_len);

/**
 * Log-probability of a finished response given a prompt. The response ends
 * with EOS or was cut at the length cap.
 *
 * # Safety
 * The token pointers must cover their lengths (null allowed when zero) and
 * `log_prob` must be valid.
 */
enum KdStatus kd_model_log_prob(const struct KdModel *model,
                                const uint32_t *prompt,
                                size_t prompt_len,
                                const uint32_t *response,
                                size_t response_len,
                                double *log_prob);

/**
 * Exact sequence-level KL between `teacher` and `student` for one prompt with
 * responses capped at `max_len` tokens. `reverse` selects `KL[student||teacher]`
 * instead of `KL[teacher||student]`. Result in nats.
 *
 * # Safety
 * Both handles must be live, `prompt` must cover `prompt_len` ids and `kl`
 * must be valid.
 */
enum KdStatus kd_kl(const struct KdModel *teacher,
                    const struct KdModel *student,
                    const uint32_t *prompt,
                    size_t prompt_len,
                    size_t max_len,
                    bool reverse,
                    double *kl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDLAB_H */
