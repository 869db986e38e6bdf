#ifndef ENTREC_H
#define ENTREC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call.
 */
typedef enum EntrecStatus {
  ENTREC_STATUS_OK = 0,
  /**
   * Bad argument, unusable checkpoint stage or invalid configuration.
   */
  ENTREC_STATUS_USAGE = 1,
  /**
   * Unreadable or malformed input, unknown article ids.
   */
  ENTREC_STATUS_DATA = 2,
  /**
   * Non-finite values during scoring.
   */
  ENTREC_STATUS_NUMERICAL = 3,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  ENTREC_STATUS_INVALID_POINTER = 4,
  /**
   * The metric is undefined for the given labels.
   */
  ENTREC_STATUS_UNDEFINED = 5,
  /**
   * Internal failure; the message names it.
   */
  ENTREC_STATUS_INTERNAL = 6,
} EntrecStatus;

/**
 * A loaded recommender and the news it can score.
 */
typedef struct EntrecModel EntrecModel;

/**
 * Ranking metrics for one impression.
 */
typedef struct EntrecMetrics {
  double auc;
  double mrr;
  double ndcg5;
  double ndcg10;
} EntrecMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *entrec_version(void);

/**
 * Message describing the last failure on this thread (empty after a
 * successful call). Valid until the next call on the same thread.
 */
const char *entrec_last_error(void);

/**
 * Loads a trained recommender checkpoint and the news file
 * (MIND `news.tsv` or `.jsonl`) whose articles it will score.
 *
 * # Safety
 * `checkpoint` and `news` must be NUL-terminated strings; `out` must be a
 * valid pointer. On success `*out` owns a handle for [`entrec_model_close`].
 */
enum EntrecStatus entrec_model_open(const char *checkpoint,
                                    const char *news,
                                    struct EntrecModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`entrec_model_open`] that has not
 * been closed.
 */
void entrec_model_close(struct EntrecModel *model);

/**
 * Ranks `candidates` for a reader whose history (oldest first) is given.
 * Writes up to `top_k` results, best first, as indices into `candidates`
 * and their scores; `*out_len` receives the number written.
 *
 * # Safety
 * `model` must be a live handle; `history` and `candidates` must point to
 * `n_history` and `n_candidates` NUL-terminated strings; `out_indices` and
 * `out_scores` must have room for `min(top_k, n_candidates)` entries.
 */
enum EntrecStatus entrec_recommend(const struct EntrecModel *model,
                                   const char *const *history,
                                   size_t n_history,
                                   const char *const *candidates,
                                   size_t n_candidates,
                                   size_t top_k,
                                   size_t *out_indices,
                                   double *out_scores,
                                   size_t *out_len);

/**
 * AUC, MRR and nDCG@5/10 for one impression. Labels are 0 or 1.
 * Returns [`EntrecStatus::Undefined`] unless both labels occur.
 *
 * # Safety
 * `scores` and `labels` must point to `n` values; `out` must be valid.
 */
enum EntrecStatus entrec_metrics(const double *scores,
                                 const uint8_t *labels,
                                 size_t n,
                                 struct EntrecMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTREC_H */
