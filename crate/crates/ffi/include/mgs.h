#ifndef MGS_H
#define MGS_H

/* Generated by cbindgen from the mgs-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Trajectory alignment modes for [`mgs_ate_rmse`].
 */
typedef enum {
  MgsAlignNone = 0,
  MgsAlignSe3 = 1,
  MgsAlignSim3 = 2,
} MgsAlign;

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  MgsOk = 0,
  MgsInvalidArgument = 1,
  MgsIoError = 2,
  MgsParseError = 3,
  MgsRuntimeError = 4,
  MgsPanic = 5,
} MgsStatus;

/**
 * Opaque run configuration handle.
 */
typedef struct MgsConfig MgsConfig;

/**
 * Opaque Gaussian map handle.
 */
typedef struct MgsMap MgsMap;

/**
 * Summary of a completed run.
 */
typedef struct {
  uint64_t frames_tracked;
  uint64_t keyframes;
  uint64_t gaussians;
  double ate_full_cm;
  double ate_keyframes_cm;
  double mean_psnr_db;
  double mean_ssim;
  /**
   * Negative when depth ground truth was unavailable.
   */
  double mean_depth_l1_cm;
} MgsRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mgs_version(void);

/**
 * Message of the most recent error on this thread (empty when none).
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *mgs_last_error(void);

/**
 * New configuration with default values. Free with [`mgs_config_free`].
 */
MgsConfig *mgs_config_new(void);

/**
 * Load a key=value configuration file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be writable.
 */
MgsStatus mgs_config_load(const char *path, MgsConfig **out);

/**
 * Apply one `key=value` assignment to a configuration.
 *
 * # Safety
 * `config` must come from this library; `key` and `value` must be valid
 * NUL-terminated strings.
 */
MgsStatus mgs_config_set(MgsConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must come from this library and not be used afterwards.
 */
void mgs_config_free(MgsConfig *config);

/**
 * Run the full pipeline described by the configuration. Artifacts land in
 * the configuration's output directory; `summary` (optional) receives the
 * headline numbers.
 *
 * # Safety
 * `config` must come from this library; `summary` may be null.
 */
MgsStatus mgs_run(const MgsConfig *config, MgsRunSummary *summary);

/**
 * Load a map checkpoint (MGSM format).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be writable.
 */
MgsStatus mgs_map_load(const char *path, MgsMap **out);

/**
 * Save a map checkpoint (MGSM format).
 *
 * # Safety
 * `map` must come from this library; `path` must be a valid string.
 */
MgsStatus mgs_map_save(const MgsMap *map, const char *path);

/**
 * Number of Gaussians in the map.
 *
 * # Safety
 * `map` must come from this library or be null (returns 0).
 */
uint64_t mgs_map_len(const MgsMap *map);

/**
 * # Safety
 * `map` must come from this library and not be used afterwards.
 */
void mgs_map_free(MgsMap *map);

/**
 * Render the map from a camera-to-world pose
 * `[tx, ty, tz, qx, qy, qz, qw]` with the given pinhole intrinsics.
 * `out_color` receives `width*height*3` floats in [0,1] (row-major RGB),
 * `out_depth` (optional) `width*height` floats in meters.
 *
 * # Safety
 * `map` must come from this library; `pose_twc` must point at 7 doubles;
 * the output buffers must hold the advertised number of floats.
 */
MgsStatus mgs_map_render(const MgsMap *map,
                         const double *pose_twc,
                         double fx,
                         double fy,
                         double cx,
                         double cy,
                         int width,
                         int height,
                         float *out_color,
                         float *out_depth);

/**
 * Absolute trajectory error (RMSE, centimeters) between two TUM-format
 * trajectory files.
 *
 * # Safety
 * `estimated` and `reference` must be valid NUL-terminated paths; `out_cm`
 * must be writable.
 */
MgsStatus mgs_ate_rmse(const char *estimated,
                       const char *reference,
                       MgsAlign align,
                       double *out_cm);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MGS_H */
