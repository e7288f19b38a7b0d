#ifndef SRGAN_H
#define SRGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SrganStatus {
  SRGAN_STATUS_OK = 0,
  SRGAN_STATUS_NULL_POINTER = 1,
  SRGAN_STATUS_INVALID_ARGUMENT = 2,
  SRGAN_STATUS_DATA_ERROR = 3,
  SRGAN_STATUS_DIVERGED = 4,
  SRGAN_STATUS_CHECKPOINT_ERROR = 5,
  SRGAN_STATUS_IO_ERROR = 6,
  SRGAN_STATUS_PANIC = 7,
} SrganStatus;

typedef enum SrganMode {
  SRGAN_MODE_ZSL = 0,
  SRGAN_MODE_GZSL = 1,
} SrganMode;

/**
 * A loaded, normalised dataset.
 */
typedef struct SrganDataset SrganDataset;

/**
 * A trained model bundle.
 */
typedef struct SrganModel SrganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *srgan_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *srgan_version(void);

/**
 * `2us / (u + s)`, written to `out`.
 *
 * # Safety
 * `out` must be null or valid for a write.
 */
enum SrganStatus srgan_harmonic(double u, double s, double *out);

/**
 * Writes a synthetic dataset directory.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum SrganStatus srgan_gen_toy(uint64_t seed,
                               size_t n_seen,
                               size_t n_unseen,
                               size_t d_v,
                               size_t d_s,
                               double overlap,
                               size_t per_class,
                               const char *out_dir);

/**
 * Loads and normalises the dataset at `path` (a directory or manifest).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a write.
 */
enum SrganStatus srgan_dataset_load(const char *path, struct SrganDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from [`srgan_dataset_load`] not yet freed.
 */
void srgan_dataset_free(struct SrganDataset *ds);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t srgan_dataset_n_classes(const struct SrganDataset *ds);

/**
 * Trains rectifier and generator. `config_json` holds `TrainConfig` fields
 * applied over the toy preset; null means the preset itself.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config_json` null or a
 * NUL-terminated string, `out` valid for a write.
 */
enum SrganStatus srgan_train(const struct SrganDataset *ds,
                             const char *config_json,
                             struct SrganModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum SrganStatus srgan_model_save(const struct SrganModel *model, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a write.
 */
enum SrganStatus srgan_model_load(const char *path, struct SrganModel **out);

/**
 * # Safety
 * `model` must be null or a live handle not yet freed.
 */
void srgan_model_free(struct SrganModel *model);

/**
 * Scores `model` on `ds` with the nearest-centroid classifier. The JSON
 * report goes to `*json_out`, to be released with [`srgan_string_free`].
 *
 * # Safety
 * Handles must be live; `json_out` valid for a write.
 */
enum SrganStatus srgan_eval(const struct SrganModel *model,
                            const struct SrganDataset *ds,
                            enum SrganMode mode,
                            size_t n_per_class,
                            uint64_t seed,
                            char **json_out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void srgan_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRGAN_H */
