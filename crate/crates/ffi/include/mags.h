#ifndef MAGS_H
#define MAGS_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MagsStatus {
  MAGS_STATUS_OK = 0,
  MAGS_STATUS_NULL_POINTER = 1,
  MAGS_STATUS_INVALID_ARGUMENT = 2,
  MAGS_STATUS_IO = 3,
  MAGS_STATUS_FORMAT = 4,
  MAGS_STATUS_DIMENSION_MISMATCH = 5,
  MAGS_STATUS_NUMERICAL = 6,
  MAGS_STATUS_PANIC = 7,
} MagsStatus;

// Loaded trace dataset.
typedef struct MagsDataset MagsDataset;

// Fitted error manifold of one head.
typedef struct MagsManifold MagsManifold;

// Steering plan loaded from a plan file.
typedef struct MagsPlan MagsPlan;

typedef struct MagsHeadId {
  uint32_t layer;
  uint32_t head;
} MagsHeadId;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *mags_last_error(void);

// Reads a trace-store directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MagsStatus mags_dataset_read(const char *path, struct MagsDataset **out);

// Number of traces, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t mags_dataset_len(const struct MagsDataset *ds);

// Head output dimension, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t mags_dataset_head_dim(const struct MagsDataset *ds);

// # Safety
// `ds` must be null or a handle from [`mags_dataset_read`] not yet freed.
void mags_dataset_free(struct MagsDataset *ds);

// Fits a rank-`k` manifold for one head on every trace of the dataset.
//
// # Safety
// `ds` must be a live dataset handle; `out` must be writable.
enum MagsStatus mags_manifold_fit(const struct MagsDataset *ds,
                                  struct MagsHeadId head,
                                  size_t k,
                                  struct MagsManifold **out);

// Loads `manifold_<layer>_<head>` from `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum MagsStatus mags_manifold_read(const char *dir,
                                   struct MagsHeadId head,
                                   struct MagsManifold **out);

// # Safety
// `m` must be a live manifold handle; `dir` a NUL-terminated string.
enum MagsStatus mags_manifold_write(const struct MagsManifold *m, const char *dir);

// Subspace rank, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live manifold handle.
size_t mags_manifold_rank(const struct MagsManifold *m);

// Head output dimension, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live manifold handle.
size_t mags_manifold_head_dim(const struct MagsManifold *m);

// Sets the threshold to percentile `q` of the dataset's correct-trace
// scores and writes it to `tau`.
//
// # Safety
// `m` and `ds` must be live handles; `tau` must be null or writable.
enum MagsStatus mags_manifold_calibrate(struct MagsManifold *m,
                                        const struct MagsDataset *ds,
                                        double q,
                                        double *tau);

// Writes `|B (a - mu_c)|^2` to `out`.
//
// # Safety
// `a` must point to `len` readable values; `out` must be writable.
enum MagsStatus mags_proximity_score(const struct MagsManifold *m,
                                     const double *a,
                                     size_t len,
                                     double *out);

// Writes `a - alpha B^T B (a - mu_c)` to `out` unconditionally.
//
// # Safety
// `a` and `out` must each point to `len` values; they may alias.
enum MagsStatus mags_correct(const struct MagsManifold *m,
                             double alpha,
                             const double *a,
                             double *out,
                             size_t len);

// # Safety
// `m` must be null or a manifold handle not yet freed.
void mags_manifold_free(struct MagsManifold *m);

// AUROC with label 1 marking the positive (incorrect) class.
//
// # Safety
// `labels` and `scores` must each point to `n` readable values.
enum MagsStatus mags_auroc(const uint8_t *labels, const double *scores, size_t n, double *out);

// Loads a plan file; relative manifold directories resolve against the
// plan file's directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MagsStatus mags_plan_load(const char *path, struct MagsPlan **out);

// Number of steering units, or 0 for a null handle.
//
// # Safety
// `plan` must be null or a live plan handle.
size_t mags_plan_len(const struct MagsPlan *plan);

// One gated steering step. `activations` holds `n_heads` blocks of
// `head_dim` values, block `i` belonging to `heads[i]`; it is corrected in
// place. The number of units that fired is written to `fired`.
//
// # Safety
// `heads` must point to `n_heads` entries and `activations` to
// `n_heads * head_dim` values; `fired` must be null or writable.
enum MagsStatus mags_plan_steer_step(const struct MagsPlan *plan,
                                     size_t step,
                                     const struct MagsHeadId *heads,
                                     size_t n_heads,
                                     size_t head_dim,
                                     double *activations,
                                     size_t *fired);

// # Safety
// `plan` must be null or a plan handle not yet freed.
void mags_plan_free(struct MagsPlan *plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAGS_H */
