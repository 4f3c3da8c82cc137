#ifndef SEQTRANS_H
#define SEQTRANS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SeqtransStatus {
  SeqtransStatus_Ok = 0,
  SeqtransStatus_NullPointer = 1,
  SeqtransStatus_InvalidArgument = 2,
  SeqtransStatus_Io = 3,
  SeqtransStatus_Parse = 4,
  SeqtransStatus_Contract = 5,
  SeqtransStatus_Mismatch = 6,
  SeqtransStatus_Corrupt = 7,
  SeqtransStatus_BufferTooSmall = 8,
  SeqtransStatus_Panic = 9,
} SeqtransStatus;

/**
 * Which held-out event to rank.
 */
typedef enum SeqtransSplit {
  SeqtransSplit_Valid = 0,
  SeqtransSplit_Test = 1,
} SeqtransSplit;

/**
 * A leave-one-out split loaded from a split cache file.
 */
typedef struct SeqtransDataset SeqtransDataset;

/**
 * A trained checkpoint.
 */
typedef struct SeqtransModel SeqtransModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. Valid until the next failing call.
 */
const char *seqtrans_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *seqtrans_version(void);

/**
 * Load a split cache written by `seqtrans prepare`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SeqtransStatus seqtrans_dataset_load(const char *path, struct SeqtransDataset **out);

/**
 * # Safety
 * `ds` must come from `seqtrans_dataset_load` and not be used afterwards. NULL is ignored.
 */
void seqtrans_dataset_free(struct SeqtransDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle or NULL (returns 0).
 */
size_t seqtrans_dataset_num_users(const struct SeqtransDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle or NULL (returns 0).
 */
size_t seqtrans_dataset_num_items(const struct SeqtransDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle or NULL (returns 0).
 */
size_t seqtrans_dataset_num_categories(const struct SeqtransDataset *ds);

/**
 * Load a checkpoint written by `seqtrans train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SeqtransStatus seqtrans_model_load(const char *path, struct SeqtransModel **out);

/**
 * # Safety
 * `model` must come from `seqtrans_model_load` and not be used afterwards. NULL is ignored.
 */
void seqtrans_model_free(struct SeqtransModel *model);

/**
 * Variant tag (`"tstm"`, `"lstm"`, ...) as a static string, or NULL for a NULL handle.
 *
 * # Safety
 * `model` must be a live model handle or NULL.
 */
const char *seqtrans_model_variant(const struct SeqtransModel *model);

/**
 * # Safety
 * `model` must be a live model handle or NULL (returns 0).
 */
size_t seqtrans_model_num_items(const struct SeqtransModel *model);

/**
 * Score every catalog item as the next event after a history.
 *
 * `items` and `cats` hold `len` dense ids (items and categories start at 1).
 * `scores[k]` receives the score of item `k + 1`; `capacity` must be at least
 * `seqtrans_model_num_items(model)`.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum SeqtransStatus seqtrans_model_score(const struct SeqtransModel *model,
                                         size_t user,
                                         const size_t *items,
                                         const size_t *cats,
                                         size_t len,
                                         double *scores,
                                         size_t capacity);

/**
 * Hit@n and NDCG@n of the model on one split with `negatives` sampled unvisited items per user
 * (0 ranks the whole catalog). `hit` and `ndcg` receive one value per cutoff.
 *
 * # Safety
 * Handles must be live; `cutoffs`, `hit` and `ndcg` must hold `n_cutoffs` elements.
 */
enum SeqtransStatus seqtrans_evaluate(const struct SeqtransModel *model,
                                      const struct SeqtransDataset *ds,
                                      enum SeqtransSplit split,
                                      size_t negatives,
                                      uint64_t seed,
                                      const size_t *cutoffs,
                                      size_t n_cutoffs,
                                      double *hit,
                                      double *ndcg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQTRANS_H */
