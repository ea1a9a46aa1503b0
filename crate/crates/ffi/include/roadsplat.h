#ifndef ROADSPLAT_H
#define ROADSPLAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_INVALID_ARGUMENT = 2,
  RS_STATUS_BUFFER_SIZE = 3,
  RS_STATUS_IO = 4,
  RS_STATUS_FORMAT = 5,
  RS_STATUS_NUMERIC = 6,
  RS_STATUS_PANIC = 7,
} RsStatus;

/*
 A pinhole camera with its pose.
 */
typedef struct RsCamera RsCamera;

/*
 A Gaussian grid scene.
 */
typedef struct RsScene RsScene;

/*
 Elevation error summary (metres and percent).
 */
typedef struct RsElevationMetrics {
  double aae_m;
  double rmse_m;
  double pct_gt_5mm;
  size_t count;
} RsElevationMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call into this library.
 */
const char *rs_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *rs_version(void);

/*
 Reads a scene written by the `roadsplat` tool.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RsStatus rs_scene_load(const char *path, struct RsScene **out);

/*
 Builds the ground-truth scene of a JSON recipe.

 # Safety
 `recipe_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RsStatus rs_scene_from_recipe(const char *recipe_json, struct RsScene **out);

/*
 Writes `scene` in the `roadsplat` scene format (single precision).

 # Safety
 `scene` must come from this library and `path` be NUL-terminated.
 */
enum RsStatus rs_scene_save(const struct RsScene *scene, const char *path);

/*
 Number of Gaussians, or 0 for a NULL handle.

 # Safety
 `scene` must be NULL or come from this library.
 */
size_t rs_scene_len(const struct RsScene *scene);

/*
 # Safety
 `scene` must be NULL or come from this library, and not be used again.
 */
void rs_scene_free(struct RsScene *scene);

/*
 Creates a camera from intrinsics and a world-to-camera pose
 (`rotation` row-major 3×3, `translation` 3 values).

 # Safety
 `rotation` must point to 9 doubles, `translation` to 3, `out` be valid.
 */
enum RsStatus rs_camera_new(double fx,
                            double fy,
                            double cx,
                            double cy,
                            uint32_t width,
                            uint32_t height,
                            const double *rotation,
                            const double *translation,
                            struct RsCamera **out);

/*
 Camera centred at `(x, y, z)` in road coordinates, pitched down by
 `pitch` radians and yawed by `yaw`.

 # Safety
 `out` must be a valid pointer.
 */
enum RsStatus rs_camera_looking_down(double fx,
                                     double fy,
                                     double cx,
                                     double cy,
                                     uint32_t width,
                                     uint32_t height,
                                     double x,
                                     double y,
                                     double z,
                                     double pitch,
                                     double yaw,
                                     struct RsCamera **out);

/*
 Reads a camera text file.

 # Safety
 `path` must be NUL-terminated and `out` a valid pointer.
 */
enum RsStatus rs_camera_load(const char *path, struct RsCamera **out);

/*
 Image size of `camera`.

 # Safety
 `camera` must come from this library; `width` and `height` must be valid.
 */
enum RsStatus rs_camera_size(const struct RsCamera *camera, uint32_t *width, uint32_t *height);

/*
 # Safety
 `camera` must be NULL or come from this library, and not be used again.
 */
void rs_camera_free(struct RsCamera *camera);

/*
 Renders `scene` through `camera` into `rgb` (width × height × 3) and,
 when `alpha` is not NULL, accumulated opacity (width × height).

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum RsStatus rs_render(const struct RsScene *scene,
                        const struct RsCamera *camera,
                        double *rgb,
                        size_t rgb_len,
                        double *alpha,
                        size_t alpha_len);

/*
 Gradients of `Σ d_rgb · rgb` with respect to the scene parameters.
 Output sizes for `n` Gaussians: `d_sh` 12n, `d_opacity` n,
 `d_rotation` 4n, `d_elevation` n, `d_scale` 3.

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum RsStatus rs_render_backward(const struct RsScene *scene,
                                 const struct RsCamera *camera,
                                 const double *d_rgb,
                                 size_t d_rgb_len,
                                 double *d_sh,
                                 size_t d_sh_len,
                                 double *d_opacity,
                                 size_t d_opacity_len,
                                 double *d_rotation,
                                 size_t d_rotation_len,
                                 double *d_elevation,
                                 size_t d_elevation_len,
                                 double *d_scale);

/*
 Refines colour, rotation and opacity of `scene` in place against
 `target_rgb` seen from `camera`, with the default rates. Writes the loss
 before and after when the pointers are not NULL.

 # Safety
 `target_rgb` must hold width × height × 3 doubles.
 */
enum RsStatus rs_test_time_optimize(struct RsScene *scene,
                                    const struct RsCamera *camera,
                                    const double *target_rgb,
                                    size_t target_len,
                                    uint32_t iterations,
                                    double *loss_initial,
                                    double *loss_final);

/*
 Elevation errors over `n` cells; `valid` may be NULL (all cells valid).

 # Safety
 `pred` and `gt` must hold `n` doubles, `valid` NULL or `n` bytes.
 */
enum RsStatus rs_elevation_metrics(const double *pred,
                                   const double *gt,
                                   const uint8_t *valid,
                                   size_t n,
                                   struct RsElevationMetrics *out);

/*
 PSNR (dB) and mean SSIM of two interleaved images with values in [0, 1].
 Either output pointer may be NULL.

 # Safety
 `a` and `b` must hold width × height × channels doubles.
 */
enum RsStatus rs_image_metrics(const double *a,
                               const double *b,
                               uint32_t width,
                               uint32_t height,
                               uint32_t channels,
                               double *psnr_db,
                               double *ssim_mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROADSPLAT_H */
