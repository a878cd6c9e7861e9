#ifndef ALMP_H
#define ALMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdint.h>
#include <stddef.h>
#include <stdbool.h>

/**
 * Which entries [`almp_prune`] resets.
 */
typedef enum AlmpPruneUnit {
  /**
   * The lowest-scoring `knob` percent of every matrix.
   */
  ALMP_PRUNE_UNIT_PARAMETER = 0,
  /**
   * Whole adapters whose mean score is below `knob`.
   */
  ALMP_PRUNE_UNIT_MODULE = 1,
} AlmpPruneUnit;

/**
 * Result of every fallible call. Codes 2–4 match the CLI exit codes.
 */
typedef enum AlmpStatus {
  ALMP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ALMP_STATUS_NULL_POINTER = 1,
  /**
   * Bad configuration or a violated call contract.
   */
  ALMP_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable, malformed or mis-shaped data.
   */
  ALMP_STATUS_DATA = 3,
  /**
   * A computation produced a non-finite value.
   */
  ALMP_STATUS_NUMERICAL = 4,
  /**
   * The output buffer is too small; the needed length was written.
   */
  ALMP_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  ALMP_STATUS_INTERNAL = 6,
} AlmpStatus;

/**
 * An ordered set of adapters, bound to the base it was loaded against.
 */
typedef struct AlmpAdapters AlmpAdapters;

/**
 * A frozen base model.
 */
typedef struct AlmpBase AlmpBase;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *almp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *almp_version(void);

/**
 * Loads a base checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AlmpStatus almp_base_load(const char *path, struct AlmpBase **out);

/**
 * Vocabulary size of the base.
 *
 * # Safety
 * `base` must be a live handle or null (returns 0).
 */
uintptr_t almp_base_vocab_size(const struct AlmpBase *base);

/**
 * # Safety
 * `base` must come from [`almp_base_load`] and not be used afterwards.
 */
void almp_base_free(struct AlmpBase *base);

/**
 * Loads an adapter checkpoint and checks it against `base`.
 *
 * # Safety
 * `path` must be NUL-terminated, `base` a live handle, `out` writable.
 */
enum AlmpStatus almp_adapters_load(const char *path,
                                   const struct AlmpBase *base,
                                   struct AlmpAdapters **out);

/**
 * Writes the adapters to a checkpoint file.
 *
 * # Safety
 * `adapters` must be a live handle and `path` NUL-terminated.
 */
enum AlmpStatus almp_adapters_save(const struct AlmpAdapters *adapters, const char *path);

/**
 * Independent copy of a handle (e.g. to keep as a reset snapshot).
 *
 * # Safety
 * `adapters` must be a live handle; `out` writable.
 */
enum AlmpStatus almp_adapters_clone(const struct AlmpAdapters *adapters, struct AlmpAdapters **out);

/**
 * Union of two sets (each site's adapters in order `a` then `b`).
 *
 * # Safety
 * `a`, `b` must be live handles; `out` writable.
 */
enum AlmpStatus almp_adapters_merge(const struct AlmpAdapters *a,
                                    const struct AlmpAdapters *b,
                                    struct AlmpAdapters **out);

/**
 * Number of adapters in the set (null gives 0).
 *
 * # Safety
 * `adapters` must be a live handle or null.
 */
uintptr_t almp_adapters_count(const struct AlmpAdapters *adapters);

/**
 * Total number of `A` and `B` entries, i.e. the length of a score vector
 * for [`almp_prune`] (null gives 0).
 *
 * # Safety
 * `adapters` must be a live handle or null.
 */
uintptr_t almp_adapters_entry_count(const struct AlmpAdapters *adapters);

/**
 * Copies every entry into `out` in score order: per adapter, `A` then `B`,
 * row-major. Fails with `BufferTooSmall` if `cap` is short.
 *
 * # Safety
 * `adapters` must be a live handle; `out` must hold `cap` floats.
 */
enum AlmpStatus almp_adapters_values(const struct AlmpAdapters *adapters,
                                     float *out,
                                     uintptr_t cap);

/**
 * # Safety
 * `adapters` must come from this library and not be used afterwards.
 */
void almp_adapters_free(struct AlmpAdapters *adapters);

/**
 * Greedy decoding of `input` (symbol ids, without BOS/SEP). `adapters`
 * may be null for the bare base. Writes at most `cap` ids to `out` and the
 * produced length to `out_len`; if `cap` is too small, `out_len` holds the
 * needed length and `BufferTooSmall` is returned.
 *
 * # Safety
 * Pointers must be valid for the given lengths; handles must be live.
 */
enum AlmpStatus almp_decode(const struct AlmpBase *base,
                            const struct AlmpAdapters *adapters,
                            const uint32_t *input,
                            uintptr_t input_len,
                            uintptr_t max_new,
                            uint32_t *out,
                            uintptr_t cap,
                            uintptr_t *out_len);

/**
 * Resets low-importance entries of `adapters` in place.
 *
 * `scores` holds one value per entry in the order of
 * [`almp_adapters_values`]. `knob` is the percentage for
 * `AlmpPruneUnit::Parameter` and τ for `AlmpPruneUnit::Module`. With
 * `init` null entries are zeroed; otherwise they are restored from `init`,
 * which must have the same shapes. The number of reset entries is written
 * to `reset_count` if it is non-null.
 *
 * # Safety
 * Handles must be live; `scores` must hold `scores_len` floats.
 */
enum AlmpStatus almp_prune(struct AlmpAdapters *adapters,
                           const float *scores,
                           uintptr_t scores_len,
                           enum AlmpPruneUnit unit,
                           double knob,
                           const struct AlmpAdapters *init,
                           uintptr_t *reset_count);

/**
 * ROUGE-L F-measure of two id sequences (0 if either is empty).
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` writable.
 */
enum AlmpStatus almp_rouge_l(const uint32_t *hyp,
                             uintptr_t hyp_len,
                             const uint32_t *reference,
                             uintptr_t ref_len,
                             double *out);

/**
 * ROUGE-N F-measure with clipped counts; `n` must be at least 1.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` writable.
 */
enum AlmpStatus almp_rouge_n(const uint32_t *hyp,
                             uintptr_t hyp_len,
                             const uint32_t *reference,
                             uintptr_t ref_len,
                             uintptr_t n,
                             double *out);

/**
 * Sentence BLEU-4 on a 0–100 scale.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` writable.
 */
enum AlmpStatus almp_bleu(const uint32_t *hyp,
                          uintptr_t hyp_len,
                          const uint32_t *reference,
                          uintptr_t ref_len,
                          double *out);

/**
 * Paired approximate randomization p-value for per-example scores.
 *
 * # Safety
 * `a` and `b` must each hold `n` doubles; `out` writable.
 */
enum AlmpStatus almp_approx_randomization(const double *a,
                                          const double *b,
                                          uintptr_t n,
                                          uintptr_t rounds,
                                          uint64_t seed,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALMP_H */
