#ifndef FLOWDISTILL_H
#define FLOWDISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FdStatus {
  FD_STATUS_OK = 0,
  FD_STATUS_NULL_POINTER = 1,
  FD_STATUS_INVALID_ARGUMENT = 2,
  FD_STATUS_SHAPE = 3,
  FD_STATUS_IO = 4,
  FD_STATUS_CORRUPT = 5,
  FD_STATUS_PANIC = 6,
} FdStatus;

/**
 * Opaque checkpoint handle.
 */
typedef struct FdCheckpoint FdCheckpoint;

/**
 * Opaque dataset handle.
 */
typedef struct FdDataset FdDataset;

typedef struct FdTrainConfig {
  uint64_t seed;
  size_t steps;
  double dt;
  size_t num_sweeps;
  double tau;
  double base_lr;
  double w_sc;
  double w_tc;
  double w_d2s;
  bool enable_vc;
  bool enable_d2s;
  bool enable_fcl;
} FdTrainConfig;

typedef struct FdDatasetConfig {
  uint64_t seed;
  size_t scenes;
  size_t num_classes;
  size_t cameras;
  size_t beams;
  double hz;
} FdDatasetConfig;

typedef struct FdHistoryRow {
  size_t step;
  double lr;
  double l_sc;
  double l_tc;
  double l_d2s;
  double total;
  bool skipped;
} FdHistoryRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *fd_last_error_message(void);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum FdStatus fd_train_config_default(struct FdTrainConfig *out);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum FdStatus fd_dataset_config_default(struct FdDatasetConfig *out);

/**
 * # Safety
 * `config` must be null or point to a valid config; `out` must be null or
 * valid for writes.
 */
enum FdStatus fd_dataset_generate(const struct FdDatasetConfig *config, struct FdDataset **out);

/**
 * # Safety
 * `dir` must be null or a NUL-terminated string; `out` must be null or
 * valid for writes.
 */
enum FdStatus fd_dataset_load(const char *dir, struct FdDataset **out);

/**
 * # Safety
 * `dataset` must be null or a live handle; `dir` null or NUL-terminated.
 */
enum FdStatus fd_dataset_save(const struct FdDataset *dataset, const char *dir);

/**
 * # Safety
 * `dataset` must be null or a live handle; `out` null or valid for writes.
 */
enum FdStatus fd_dataset_scene_count(const struct FdDataset *dataset, size_t *out);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void fd_dataset_free(struct FdDataset *dataset);

/**
 * Runs a full pretraining from a fresh initialization.
 *
 * # Safety
 * `dataset` and `config` must be null or valid; `out` null or valid for
 * writes.
 */
enum FdStatus fd_pretrain(const struct FdDataset *dataset,
                          const struct FdTrainConfig *config,
                          struct FdCheckpoint **out);

/**
 * # Safety
 * `path` must be null or NUL-terminated; `out` null or valid for writes.
 */
enum FdStatus fd_checkpoint_load(const char *path, struct FdCheckpoint **out);

/**
 * # Safety
 * `ckpt` must be null or a live handle; `path` null or NUL-terminated.
 */
enum FdStatus fd_checkpoint_save(const struct FdCheckpoint *ckpt, const char *path);

/**
 * # Safety
 * `ckpt` must be null or a live handle; `out` null or valid for writes.
 */
enum FdStatus fd_checkpoint_history_len(const struct FdCheckpoint *ckpt, size_t *out);

/**
 * # Safety
 * `ckpt` must be null or a live handle; `out` null or valid for writes.
 */
enum FdStatus fd_checkpoint_history_row(const struct FdCheckpoint *ckpt,
                                        size_t index,
                                        struct FdHistoryRow *out);

/**
 * Backbone output width D.
 *
 * # Safety
 * `ckpt` must be null or a live handle; `out` null or valid for writes.
 */
enum FdStatus fd_checkpoint_feature_dim(const struct FdCheckpoint *ckpt, size_t *out);

/**
 * # Safety
 * `ckpt` must be null or a handle not yet freed.
 */
void fd_checkpoint_free(struct FdCheckpoint *ckpt);

/**
 * Backbone features of `n` points: `coords` is n x 3, `feats` n x
 * `channels`, `out` n x D.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum FdStatus fd_encode_points(const struct FdCheckpoint *ckpt,
                               const double *coords,
                               const double *feats,
                               size_t n,
                               size_t channels,
                               double *out);

/**
 * Linear-probe mIoU of a checkpoint's encoder, or of a random encoder
 * initialized from `seed` when `ckpt` is null.
 *
 * # Safety
 * Handles must be null or live; `out_miou` null or valid for writes.
 */
enum FdStatus fd_probe_miou(const struct FdCheckpoint *ckpt,
                            const struct FdDataset *dataset,
                            uint64_t seed,
                            double *out_miou);

/**
 * Spatial contrastive loss of v x l matrices `q` and `k`. `mask` (v bytes,
 * nonzero = excluded) and both gradient buffers may be null.
 *
 * # Safety
 * Non-null buffers must hold the stated number of elements.
 */
enum FdStatus fd_spatial_contrastive(const double *q,
                                     const double *k,
                                     size_t v,
                                     size_t l,
                                     double tau,
                                     const uint8_t *mask,
                                     double *value,
                                     double *grad_q,
                                     double *grad_k);

/**
 * Temporal contrastive loss of row-paired v x l matrices.
 *
 * # Safety
 * Non-null buffers must hold the stated number of elements.
 */
enum FdStatus fd_temporal_contrastive(const double *q_t,
                                      const double *q_other,
                                      size_t v,
                                      size_t l,
                                      double tau,
                                      double *value,
                                      double *grad_q,
                                      double *grad_k);

/**
 * Dense-to-sparse cosine distance of row-paired v x l matrices.
 *
 * # Safety
 * Non-null buffers must hold the stated number of elements.
 */
enum FdStatus fd_d2s_loss(const double *q_sparse,
                          const double *q_dense,
                          size_t v,
                          size_t l,
                          const uint8_t *mask,
                          double *value,
                          double *grad_sparse,
                          double *grad_dense);

/**
 * Per-class IoU (NaN where undefined) and mIoU (NaN when no class is
 * defined) of an n x n confusion matrix, rows = ground truth.
 *
 * # Safety
 * `counts` must hold n*n values and `per_class` (if non-null) n.
 */
enum FdStatus fd_iou_from_confusion(const uint64_t *counts,
                                    size_t n,
                                    double *per_class,
                                    double *miou);

/**
 * Corruption error and resilience rate over three severities; NaN marks an
 * undefined ratio.
 *
 * # Safety
 * `model` and `baseline` must hold three values each.
 */
enum FdStatus fd_ce_rr(const double *model,
                       const double *baseline,
                       double clean,
                       double *ce,
                       double *rr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWDISTILL_H */
