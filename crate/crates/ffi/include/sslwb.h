#ifndef SSLWB_H
#define SSLWB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SslwbStatus {
  SSLWB_STATUS_OK = 0,
  SSLWB_STATUS_INVALID_ARGUMENT = 1,
  SSLWB_STATUS_SHAPE = 2,
  SSLWB_STATUS_PARSE = 3,
  SSLWB_STATUS_UNSUPPORTED = 4,
  SSLWB_STATUS_NON_FINITE = 5,
  SSLWB_STATUS_CORRUPT = 6,
  SSLWB_STATUS_VERSION_MISMATCH = 7,
  SSLWB_STATUS_CONFIG_MISMATCH = 8,
  SSLWB_STATUS_IO = 9,
  SSLWB_STATUS_IMAGE = 10,
  SSLWB_STATUS_NULL_POINTER = 11,
  SSLWB_STATUS_PANIC = 12,
} SslwbStatus;

/**
 * A loaded checkpoint archive.
 */
typedef struct SslwbCheckpoint SslwbCheckpoint;

/**
 * A model ready for inference.
 */
typedef struct SslwbModel SslwbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sslwb_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next call into the library from this thread.
 */
const char *sslwb_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SslwbStatus sslwb_checkpoint_load(const char *path, struct SslwbCheckpoint **out);

/**
 * # Safety
 * `ckpt` must come from [`sslwb_checkpoint_load`]; `path` must be a
 * NUL-terminated string.
 */
enum SslwbStatus sslwb_checkpoint_save(const struct SslwbCheckpoint *ckpt, const char *path);

/**
 * Completed pretraining epochs.
 *
 * # Safety
 * `ckpt` must be a live handle and `out` writable.
 */
enum SslwbStatus sslwb_checkpoint_epoch(const struct SslwbCheckpoint *ckpt, uint64_t *out);

/**
 * Pretraining method of the checkpoint as a static string, or NULL for a
 * null handle.
 *
 * # Safety
 * `ckpt` must be a live handle or NULL.
 */
const char *sslwb_checkpoint_method(const struct SslwbCheckpoint *ckpt);

/**
 * # Safety
 * `ckpt` must come from [`sslwb_checkpoint_load`] and not be used after.
 */
void sslwb_checkpoint_free(struct SslwbCheckpoint *ckpt);

/**
 * Student model of a checkpoint; the checkpoint stays valid.
 *
 * # Safety
 * `ckpt` must be a live handle and `out` writable.
 */
enum SslwbStatus sslwb_model_from_checkpoint(const struct SslwbCheckpoint *ckpt,
                                             struct SslwbModel **out);

/**
 * # Safety
 * `model` must come from [`sslwb_model_from_checkpoint`] and not be used
 * after.
 */
void sslwb_model_free(struct SslwbModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SslwbStatus sslwb_model_embed_dim(const struct SslwbModel *model, uint64_t *out);

/**
 * Output count of the classification head, 0 when there is none.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SslwbStatus sslwb_model_num_classes(const struct SslwbModel *model, uint64_t *out);

/**
 * Backbone embeddings of `count` RGB images (HWC, values in [0, 1]).
 * `out` receives `count × embed_dim` floats and `out_len` must be at
 * least that.
 *
 * # Safety
 * `pixels` must hold `count × height × width × 3` floats and `out`
 * `out_len` floats.
 */
enum SslwbStatus sslwb_model_embed(const struct SslwbModel *model,
                                   const float *pixels,
                                   size_t count,
                                   size_t width,
                                   size_t height,
                                   float *out,
                                   size_t out_len);

/**
 * Predicted class index per image.
 *
 * # Safety
 * `pixels` must hold `count × height × width × 3` floats and `out`
 * `count` integers.
 */
enum SslwbStatus sslwb_model_predict(const struct SslwbModel *model,
                                     const float *pixels,
                                     size_t count,
                                     size_t width,
                                     size_t height,
                                     uint32_t *out);

/**
 * Accuracy (trace / total) of a row-major `classes × classes` count
 * matrix with rows indexed by the true class.
 *
 * # Safety
 * `counts` must hold `classes²` integers and `out` be writable.
 */
enum SslwbStatus sslwb_confusion_accuracy(const uint64_t *counts, size_t classes, double *out);

/**
 * Runs pretrain, finetune and evaluate for an experiment config, writing
 * artifacts under `out_dir`, and stores the best-on-val test accuracy.
 *
 * # Safety
 * `config_path` and `out_dir` must be NUL-terminated strings; `accuracy`
 * may be NULL.
 */
enum SslwbStatus sslwb_run_experiment(const char *config_path,
                                      const char *out_dir,
                                      double *accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSLWB_H */
