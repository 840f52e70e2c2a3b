#ifndef CSILOC_H
#define CSILOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsilocStatus {
  CSILOC_STATUS_OK = 0,
  CSILOC_STATUS_NULL_POINTER = 1,
  CSILOC_STATUS_INVALID_INPUT = 2,
  CSILOC_STATUS_LENGTH_MISMATCH = 3,
  CSILOC_STATUS_NON_FINITE = 4,
  CSILOC_STATUS_CONFIG = 5,
  CSILOC_STATUS_IO = 6,
  CSILOC_STATUS_PARSE = 7,
  CSILOC_STATUS_SHAPE_MISMATCH = 8,
  // Training diverged or an activation went non-finite.
  CSILOC_STATUS_NUMERIC = 9,
  // No usable belief, candidate or surviving trajectory.
  CSILOC_STATUS_NO_TRAJECTORY = 10,
  CSILOC_STATUS_BUFFER_TOO_SMALL = 11,
  CSILOC_STATUS_PANIC = 12,
} CsilocStatus;

// Pipeline configuration.
typedef struct CsilocConfig CsilocConfig;

// Beliefs and selected trajectory of one localized walk.
typedef struct CsilocLocalization CsilocLocalization;

// A trained classifier.
typedef struct CsilocModel CsilocModel;

// One point of the selected trajectory.
typedef struct CsilocEstimate {
  int64_t tau_ms;
  double x;
  double y;
  double theta;
  double stride;
  // Grid cell the estimate snaps to.
  size_t col;
  size_t row;
} CsilocEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library on this thread.
const char *csiloc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *csiloc_version(void);

// Removes the affine component from `n` raw phases at subcarrier indices
// `k`, writing `n` values to `out`.
//
// # Safety
// `raw`, `k` and `out` must each point to `n` valid elements.
enum CsilocStatus csiloc_sanitize_phase(const double *raw, const int32_t *k, size_t n, double *out);

// Default configuration.
//
// # Safety
// `out` must be a valid pointer to write the handle to.
enum CsilocStatus csiloc_config_default(struct CsilocConfig **out);

// Parses and validates a TOML configuration document.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum CsilocStatus csiloc_config_from_toml(const char *toml, struct CsilocConfig **out);

// Reads a TOML configuration file, applying the `CSILOC_SEED` override.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CsilocStatus csiloc_config_load(const char *path, struct CsilocConfig **out);

// Number of phase values per observation the configuration expects.
//
// # Safety
// `cfg` must be a live handle or NULL.
size_t csiloc_config_channels(const struct CsilocConfig *cfg);

// # Safety
// `cfg` must be NULL or a handle not yet freed.
void csiloc_config_free(struct CsilocConfig *cfg);

// Loads a model file written by `csiloc train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CsilocStatus csiloc_model_load(const char *path, struct CsilocModel **out);

// Location classes plus the null class.
//
// # Safety
// `model` must be a live handle or NULL.
size_t csiloc_model_n_classes(const struct CsilocModel *model);

// # Safety
// `model` must be a live handle or NULL.
size_t csiloc_model_sequence_length(const struct CsilocModel *model);

// # Safety
// `model` must be NULL or a handle not yet freed.
void csiloc_model_free(struct CsilocModel *model);

// Localizes a walk of `n_obs` observations with `n_channels` phases each,
// stored row-major in `phases`. With `raw` nonzero the phases are
// sanitized first.
//
// # Safety
// `t_ms` must hold `n_obs` values, `phases` `n_obs * n_channels`; the
// handles must be live and `out` valid.
enum CsilocStatus csiloc_localize(const struct CsilocModel *model,
                                  const struct CsilocConfig *cfg,
                                  const int64_t *t_ms,
                                  const double *phases,
                                  size_t n_obs,
                                  size_t n_channels,
                                  int32_t raw,
                                  struct CsilocLocalization **out);

// Belief timesteps of the final pass.
//
// # Safety
// `loc` must be a live handle or NULL.
size_t csiloc_localization_belief_count(const struct CsilocLocalization *loc);

// Copies the final pass's beliefs, row-major with one row of class
// probabilities per timestep, and their times. `times_ms` may be NULL.
//
// # Safety
// `probs` must hold `cap` values and `times_ms`, if not NULL, one value per
// belief.
enum CsilocStatus csiloc_localization_beliefs(const struct CsilocLocalization *loc,
                                              double *probs,
                                              size_t cap,
                                              int64_t *times_ms);

// Points in the selected trajectory; 0 when every hypothesis was rejected.
//
// # Safety
// `loc` must be a live handle or NULL.
size_t csiloc_localization_trajectory_len(const struct CsilocLocalization *loc);

// Copies the selected trajectory. Fails with `CSILOC_STATUS_NO_TRAJECTORY`
// when nothing survived tracking.
//
// # Safety
// `out` must hold `cap` estimates.
enum CsilocStatus csiloc_localization_trajectory(const struct CsilocLocalization *loc,
                                                 struct CsilocEstimate *out,
                                                 size_t cap);

// # Safety
// `loc` must be NULL or a handle not yet freed.
void csiloc_localization_free(struct CsilocLocalization *loc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSILOC_H */
