#ifndef MORPHABLE_H
#define MORPHABLE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum M3dStatus {
  M3D_STATUS_OK = 0,
  M3D_STATUS_NULL_POINTER = 1,
  M3D_STATUS_INVALID_ARGUMENT = 2,
  M3D_STATUS_SHAPE = 3,
  M3D_STATUS_DATA = 4,
  M3D_STATUS_IO = 5,
  M3D_STATUS_NUMERIC = 6,
  M3D_STATUS_PANIC = 7,
} M3dStatus;

// A backbone feature map, channel-major `[C, H, W]`.
typedef struct M3dFeatures M3dFeatures;

// A trained category model.
typedef struct M3dModel M3dModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null.
//
// The pointer stays valid until the next failing call on the same thread.
const char *m3d_last_error(void);

// Library version as a static string.
const char *m3d_version(void);

// Load a model file written by `morphable train`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a writable pointer.
enum M3dStatus m3d_model_load(const char *path, struct M3dModel **out);

// # Safety
// `model` must come from [`m3d_model_load`] and not be used afterwards.
void m3d_model_free(struct M3dModel *model);

// Number of learned scalars.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum M3dStatus m3d_model_param_count(const struct M3dModel *model, size_t *out);

// Channel count the model expects from feature maps.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum M3dStatus m3d_model_input_channels(const struct M3dModel *model, size_t *out);

// Write the template mesh as Wavefront OBJ.
//
// # Safety
// `model` must be a live handle and `path` a nul-terminated string.
enum M3dStatus m3d_model_export_obj(const struct M3dModel *model, const char *path);

// Copy `channels * height * width` floats, channel-major, into a new map.
//
// # Safety
// `data` must point to `len` readable floats and `out` be writable.
enum M3dStatus m3d_features_new(size_t channels,
                                size_t height,
                                size_t width,
                                const float *data,
                                size_t len,
                                struct M3dFeatures **out);

// Read a `.feat` file.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum M3dStatus m3d_features_load(const char *path, struct M3dFeatures **out);

// Write a `.feat` file.
//
// # Safety
// `features` must be a live handle and `path` a nul-terminated string.
enum M3dStatus m3d_features_save(const struct M3dFeatures *features, const char *path);

// # Safety
// `features` must come from this library and not be used afterwards.
void m3d_features_free(struct M3dFeatures *features);

// Estimate the object rotation with the model's camera and pose settings.
//
// Writes a row-major 3x3 matrix to `rotation` and the objective to `score`
// (either may be null).
//
// # Safety
// Handles must be live; `rotation` must have room for 9 doubles.
enum M3dStatus m3d_estimate_pose(const struct M3dModel *model,
                                 const struct M3dFeatures *features,
                                 double *rotation,
                                 double *score);

// Angle in degrees between two row-major rotation matrices.
//
// # Safety
// `a` and `b` must each point to 9 doubles; `out` must be writable.
enum M3dStatus m3d_geodesic_error_deg(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MORPHABLE_H */
