#ifndef VSUMM_H
#define VSUMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. The first four match the command-line exit codes.
typedef enum VsummStatus {
  VSUMM_STATUS_OK = 0,
  VSUMM_STATUS_CONFIG = 1,
  VSUMM_STATUS_DATA = 2,
  VSUMM_STATUS_NUMERIC = 3,
  VSUMM_STATUS_INVALID_ARGUMENT = 4,
  VSUMM_STATUS_PANIC = 5,
} VsummStatus;

// A loaded or freshly initialized model.
typedef struct VsummModel VsummModel;

// A key-shot summary.
typedef struct VsummSummary VsummSummary;

// Model hyperparameters as passed across the boundary.
typedef struct VsummModelConfig {
  size_t in_channels;
  size_t squeezed_channels;
  size_t levels;
  size_t base_channels;
  size_t expansion;
  size_t width;
  size_t height;
} VsummModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *vsumm_last_error(void);

// The library's default model configuration.
struct VsummModelConfig vsumm_model_config_default(void);

// Initializes a model with seeded random weights.
//
// # Safety
// `out` must be valid for writes.
enum VsummStatus vsumm_model_new(struct VsummModelConfig config,
                                 uint64_t seed,
                                 struct VsummModel **out);

// Loads a checkpoint written by `vsumm train` or [`vsumm_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum VsummStatus vsumm_model_load(const char *path, struct VsummModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum VsummStatus vsumm_model_save(const struct VsummModel *model, const char *path);

// # Safety
// `model` must come from this library and `out` be valid for writes.
enum VsummStatus vsumm_model_config(const struct VsummModel *model, struct VsummModelConfig *out);

// Number of scalar parameters, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t vsumm_model_param_count(const struct VsummModel *model);

// Scores every frame of a `[steps, channels, width, height]` feature block.
// Steps are padded internally and `steps * expansion` scores are written.
//
// # Safety
// `features` must hold `steps * channels * width * height` values and
// `scores` must have room for `scores_len` values.
enum VsummStatus vsumm_model_score(const struct VsummModel *model,
                                   const double *features,
                                   size_t steps,
                                   size_t channels,
                                   size_t width,
                                   size_t height,
                                   double *scores,
                                   size_t scores_len);

// # Safety
// `model` must be null or come from this library, and not be used again.
void vsumm_model_free(struct VsummModel *model);

// Segments `frames` feature vectors of length `dim` with KTS and selects
// key shots from `scores` within `budget * frames` frames.
//
// # Safety
// `scores` must hold `frames` values, `features` `frames * dim` values and
// `out` must be valid for writes.
enum VsummStatus vsumm_summary_build(const double *scores,
                                     const double *features,
                                     size_t frames,
                                     size_t dim,
                                     double budget,
                                     double max_segments_ratio,
                                     double penalty,
                                     struct VsummSummary **out);

// Mask length in frames, or 0 for a null handle.
//
// # Safety
// `s` must be null or come from this library.
size_t vsumm_summary_len(const struct VsummSummary *s);

// Frames in the summary, or 0 for a null handle.
//
// # Safety
// `s` must be null or come from this library.
size_t vsumm_summary_used(const struct VsummSummary *s);

// Writes the frame mask as 0/1 bytes.
//
// # Safety
// `s` must come from this library and `mask` have room for `len` bytes.
enum VsummStatus vsumm_summary_mask(const struct VsummSummary *s, uint8_t *mask, size_t len);

// # Safety
// `s` must be null or come from this library, and not be used again.
void vsumm_summary_free(struct VsummSummary *s);

// Overlap precision, recall and F1 of two 0/1 masks of length `len`.
//
// # Safety
// Both masks must hold `len` bytes; outputs must be valid for writes.
enum VsummStatus vsumm_f1(const uint8_t *predicted,
                          const uint8_t *reference,
                          size_t len,
                          double *precision,
                          double *recall,
                          double *f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VSUMM_H */
