#ifndef WSI_TRIAGE_H
#define WSI_TRIAGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * `outcome` values of [`WtSlideResult`].
 */
#define WT_OUTCOME_CLASSIFIED 0

#define WT_OUTCOME_NO_ROI 1

/**
 * Result code of every call.
 */
typedef enum WtStatus {
  WT_STATUS_OK = 0,
  WT_STATUS_NULL_ARGUMENT = 1,
  WT_STATUS_INVALID_INPUT = 2,
  WT_STATUS_IO = 3,
  WT_STATUS_PARSE = 4,
  WT_STATUS_CONFIG = 5,
  WT_STATUS_UNDEFINED = 6,
  WT_STATUS_PANIC = 7,
} WtStatus;

/**
 * Loaded models plus the run configuration used by [`wt_classify_slide`].
 */
typedef struct WtModels WtModels;

typedef struct WtSlideResult {
  /**
   * `WT_OUTCOME_CLASSIFIED` or `WT_OUTCOME_NO_ROI`.
   */
  int32_t outcome;
  /**
   * Class index (0 Basaloid, 1 Squamous, 2 Melanocytic, 3 Other); -1 without ROI.
   */
  int32_t class_index;
  /**
   * Confidence score; NaN without ROI.
   */
  double score;
  double column_means[4];
  /**
   * Highest confidence level whose threshold the score clears; 0 for none,
   * -1 when the models carry no thresholds.
   */
  int32_t level;
} WtSlideResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *wt_last_error_message(void);

/**
 * Loads a model directory written by `wsi-triage train` or `calibrate`.
 */
enum WtStatus wt_models_load(const char *dir, struct WtModels **out);

/**
 * Releases a handle from [`wt_models_load`]. NULL is ignored.
 */
void wt_models_free(struct WtModels *models);

/**
 * Sets one configuration key (same keys as the config file).
 */
enum WtStatus wt_models_set_config(struct WtModels *models, const char *key, const char *value);

/**
 * Classifies one slide from packed 8-bit RGB rows (`width * height * 3`
 * bytes). `slide_id` keys the random masks, so the same id and pixels give
 * the same result.
 */
enum WtStatus wt_classify_slide(const struct WtModels *models,
                                const char *slide_id,
                                const uint8_t *rgb,
                                size_t width,
                                size_t height,
                                struct WtSlideResult *out);

/**
 * Confidence score of a row-major `t x 4` matrix of sigmoid outputs: the
 * largest column mean and its class index.
 */
enum WtStatus wt_score_matrix(const double *values,
                              size_t t,
                              double *out_score,
                              int32_t *out_class);

/**
 * Smallest threshold per target whose retained validation accuracy reaches
 * it. `correct[i]` is non-zero when specimen i was classified correctly.
 * Unreachable targets are reported as +infinity.
 */
enum WtStatus wt_calibrate_thresholds(const double *scores,
                                      const uint8_t *correct,
                                      size_t n,
                                      const double *targets,
                                      size_t n_targets,
                                      double *out_thresholds);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wt_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSI_TRIAGE_H */
