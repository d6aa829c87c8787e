#ifndef TISSUEBENCH_H
#define TISSUEBENCH_H

/* Generated by cbindgen from tissuebench-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum TbStatus {
  TB_OK = 0,
  TB_ERR_NULL_ARGUMENT = 1,
  TB_ERR_INVALID_ARGUMENT = 2,
  TB_ERR_IO = 3,
  TB_ERR_RUNTIME = 4,
  TB_ERR_UTF8 = 5,
} TbStatus;

// Opaque subject handle (modalities + optional ground truth + mask).
typedef struct TbCase TbCase;

// Opaque label volume.
typedef struct TbLabelMap TbLabelMap;

// Opaque trainable model.
typedef struct TbModel TbModel;

// Opaque architecture description.
typedef struct TbSpec TbSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message for this thread, or NULL if none was recorded.
// The caller owns the returned string (release with `tb_string_free`).
char *tb_last_error_message(void);

// Library version as a static string (do not free).
const char *tb_version(void);

// Release a string returned by this library.
//
// # Safety
// `s` must be a pointer previously returned by a tissuebench function
// that transfers string ownership, and must not be used afterwards.
void tb_string_free(char *s);

// Generate a synthetic phantom case (concentric tissue shells).
//
// # Safety
// `out_case` must point to writable storage for one pointer.
enum TbStatus tb_case_generate_phantom(uint64_t seed,
                                       size_t dim_z,
                                       size_t dim_y,
                                       size_t dim_x,
                                       float noise_sigma,
                                       uint32_t modalities,
                                       struct TbCase **out_case);

// Load a case from a directory laid out as written by `tb_case_save_dir`
// (or the CLI's `phantom` verb).
//
// # Safety
// `dir` and `case_id` must be valid NUL-terminated strings; `out_case`
// must point to writable storage for one pointer.
enum TbStatus tb_case_load_dir(const char *dir,
                               const char *case_id,
                               uint32_t modalities,
                               struct TbCase **out_case);

// Write a case's NIfTI grids into a directory.
//
// # Safety
// `case` must be a live handle; `dir` a valid NUL-terminated string.
enum TbStatus tb_case_save_dir(const struct TbCase *case_, const char *dir);

// Standardize intensities over the brain mask (in place). Training and
// segmentation expect preprocessed cases.
//
// # Safety
// `case` must be a live handle.
enum TbStatus tb_case_preprocess(struct TbCase *case_);

// Volume dimensions (z, y, x).
//
// # Safety
// `case` must be a live handle; out pointers must be writable.
enum TbStatus tb_case_dims(const struct TbCase *case_, size_t *out_z, size_t *out_y, size_t *out_x);

// Clone the case's ground-truth labels, if present.
//
// # Safety
// `case` must be a live handle; `out_labels` must be writable.
enum TbStatus tb_case_ground_truth(const struct TbCase *case_, struct TbLabelMap **out_labels);

// # Safety
// `case` must originate from this library and not be freed twice.
void tb_case_free(struct TbCase *case_);

// Build an architecture spec. `family` is dm|kk|unet|uresnet, `dim` is
// 2d|3d.
//
// # Safety
// String arguments must be valid NUL-terminated strings; `out_spec` must
// be writable.
enum TbStatus tb_spec_build(const char *family,
                            const char *dim,
                            uint32_t in_channels,
                            struct TbSpec **out_spec);

// Total learnable parameters of a spec.
//
// # Safety
// `spec` must be a live handle; `out_count` must be writable.
enum TbStatus tb_spec_parameter_count(const struct TbSpec *spec, uint64_t *out_count);

// Serialize the spec's layer graph to JSON (free with `tb_string_free`).
//
// # Safety
// `spec` must be a live handle; `out_json` must be writable.
enum TbStatus tb_spec_to_json(const struct TbSpec *spec, char **out_json);

// # Safety
// `spec` must originate from this library and not be freed twice.
void tb_spec_free(struct TbSpec *spec);

// Instantiate a model with seeded deterministic weights.
//
// # Safety
// `spec` must be a live handle; `out_model` must be writable.
enum TbStatus tb_model_new(const struct TbSpec *spec, uint64_t seed, struct TbModel **out_model);

// Save a model checkpoint.
//
// # Safety
// `model` must be a live handle; `path` a valid NUL-terminated string.
enum TbStatus tb_model_save(const struct TbModel *model, const char *path);

// Load a model checkpoint.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out_model` writable.
enum TbStatus tb_model_load(const char *path, struct TbModel **out_model);

// # Safety
// `model` must originate from this library and not be freed twice.
void tb_model_free(struct TbModel *model);

// Train a model on preprocessed cases with the standard pipeline
// (patch extraction with the given overlap, weighted cross-entropy,
// early stopping with the given patience, best-weight restoration).
//
// With a single case, training and validation share that case's samples
// (the overfit smoke-test setup); with two or more, cases are split
// 80/20 at case granularity by `seed`. `max_samples_per_epoch` of 0
// means "use every sample". Writes the number of completed epochs to
// `out_epochs` when non-NULL.
//
// # Safety
// `model` must be a live handle; `cases` must point to `n_cases` live
// case handles; `overlap` must be a valid NUL-terminated string.
enum TbStatus tb_model_train(struct TbModel *model,
                             const struct TbCase *const *cases,
                             size_t n_cases,
                             const char *overlap,
                             uint32_t max_epochs,
                             uint32_t patience,
                             double val_fraction,
                             uint32_t batch_size,
                             float learning_rate,
                             uint64_t seed,
                             size_t max_samples_per_epoch,
                             uint32_t *out_epochs);

// Segment a preprocessed case with majority-vote fusion at the given
// overlap level.
//
// # Safety
// `model` and `case` must be live handles; `overlap` a valid string;
// `out_labels` writable.
enum TbStatus tb_model_segment(const struct TbModel *model,
                               const struct TbCase *case_,
                               const char *overlap,
                               struct TbLabelMap **out_labels);

// Label-map dimensions (z, y, x).
//
// # Safety
// `labels` must be a live handle; out pointers writable.
enum TbStatus tb_labelmap_dims(const struct TbLabelMap *labels,
                               size_t *out_z,
                               size_t *out_y,
                               size_t *out_x);

// Copy the labels (z-major, x fastest) into a caller buffer of exactly
// `len` bytes, where `len` must equal the voxel count.
//
// # Safety
// `labels` must be a live handle; `buffer` must point to `len` writable
// bytes.
enum TbStatus tb_labelmap_copy(const struct TbLabelMap *labels, uint8_t *buffer, size_t len);

// # Safety
// `labels` must originate from this library and not be freed twice.
void tb_labelmap_free(struct TbLabelMap *labels);

// Dice coefficient of one tissue class (1 = CSF, 2 = GM, 3 = WM).
//
// # Safety
// Both label maps must be live handles; `out_dsc` writable.
enum TbStatus tb_dice(const struct TbLabelMap *ground_truth,
                      const struct TbLabelMap *segmentation,
                      uint32_t class_id,
                      double *out_dsc);

// Wilcoxon signed-rank test on paired samples. `side`: 0 two-sided,
// 1 greater, 2 less. Writes the positive-rank sum W, the p-value, and
// the number of non-zero pairs.
//
// # Safety
// `a` and `b` must point to `n` readable doubles; out pointers writable.
enum TbStatus tb_wilcoxon_signed_rank(const double *a,
                                      const double *b,
                                      size_t n,
                                      uint32_t side,
                                      double *out_statistic,
                                      double *out_p_value,
                                      size_t *out_n_effective);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TISSUEBENCH_H */
