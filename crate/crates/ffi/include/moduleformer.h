#ifndef MODULEFORMER_H
#define MODULEFORMER_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_DIMENSION = 3,
  MF_STATUS_CONFIG = 4,
  MF_STATUS_CONTRACT = 5,
  MF_STATUS_NON_FINITE = 6,
  MF_STATUS_CHECKPOINT = 7,
  MF_STATUS_PRUNE_REFUSED = 8,
  MF_STATUS_DIVERGED = 9,
  MF_STATUS_IO = 10,
  MF_STATUS_BUFFER_TOO_SMALL = 11,
  MF_STATUS_PANIC = 12,
} MfStatus;

/**
 * Opaque model handle.
 */
typedef struct MfModel MfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t mf_last_error(char *buf, size_t cap);

/**
 * Freshly initialized model from a named preset (`"desk"` or `"tiny"`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum MfStatus mf_model_new(const char *preset, uint64_t seed, struct MfModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MfStatus mf_model_load(const char *path, struct MfModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum MfStatus mf_model_save(const struct MfModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from this library, not used afterwards.
 */
void mf_model_free(struct MfModel *model);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mf_model_vocab_size(const struct MfModel *model);

/**
 * Total, expert and trainable parameter counts. Any out pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum MfStatus mf_model_param_counts(const struct MfModel *model,
                                    uint64_t *total,
                                    uint64_t *expert,
                                    uint64_t *trainable);

/**
 * Next-token logits for one segment, written row-major as `n × vocab`.
 *
 * # Safety
 * `tokens` must hold `n` ids; `out` must hold `out_len` doubles.
 */
enum MfStatus mf_model_logits(const struct MfModel *model,
                              const uint32_t *tokens,
                              size_t n,
                              double *out,
                              size_t out_len);

/**
 * Held-out perplexity and mean feed-forward usage entropy over `tokens`,
 * read in segments of `seg_len` (0 = the training length). Either output
 * may be null.
 *
 * # Safety
 * `tokens` must hold `n` ids; non-null outputs must be writable.
 */
enum MfStatus mf_model_evaluate(const struct MfModel *model,
                                const uint32_t *tokens,
                                size_t n,
                                size_t seg_len,
                                double *perplexity,
                                double *usage_entropy);

/**
 * Samples `n_tokens` bytes after `prompt`. The prompt is copied to the front
 * of `out`; `out_len` receives the bytes written. Temperature 0 is greedy.
 *
 * # Safety
 * `prompt` must hold `prompt_len` bytes, `out` `out_cap` writable bytes.
 */
enum MfStatus mf_model_generate(const struct MfModel *model,
                                const uint8_t *prompt,
                                size_t prompt_len,
                                size_t n_tokens,
                                double temperature,
                                uint64_t seed,
                                uint8_t *out,
                                size_t out_cap,
                                size_t *out_len);

/**
 * Counts expert usage on `tokens` and removes experts whose max-normalized
 * frequency is below `tau`. On refusal the model is unchanged.
 *
 * # Safety
 * `tokens` must hold `n` ids; `expert_params_after` may be null.
 */
enum MfStatus mf_model_prune(struct MfModel *model,
                             const uint32_t *tokens,
                             size_t n,
                             double tau,
                             uint64_t *expert_params_after);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODULEFORMER_H */
