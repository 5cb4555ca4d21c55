#ifndef CROPWEED_H
#define CROPWEED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define CW_OK 0

// A required pointer argument was null.
#define CW_ERR_NULL_POINTER 1

// An argument was out of range or not valid UTF-8.
#define CW_ERR_INVALID_ARGUMENT 2

// The library panicked; the handle involved should be discarded.
#define CW_ERR_PANIC 3

// Number of classes in every probability output.
#define CW_NUM_CLASSES 3

// Opaque trained network.
typedef struct CwNetwork CwNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cw_version(void);

// Copies the last error message of this thread into `buf` (truncated and
// NUL-terminated) and returns its full length in bytes, or 0 if the last
// call succeeded.
//
// # Safety
// `buf` must be null or valid for writes of `len` bytes.
size_t cw_last_error_message(char *buf, size_t len);

// NDVI of co-registered NIR and Red reflectance, each `width * height`
// samples, written to `out` in [-1, 1].
//
// # Safety
// `nir`, `red` and `out` must each hold `width * height` doubles.
int32_t cw_ndvi(const double *nir, const double *red, uint32_t width, uint32_t height, double *out);

// Automatic label mask from an NDVI image: vegetation blobs of at least
// `min_blob_pixels` become `vegetation_class` (1 crop, 2 weed), everything
// else 0. Other settings use the library defaults.
//
// # Safety
// `ndvi` must hold `width * height` doubles and `labels` as many bytes.
int32_t cw_autolabel(const double *ndvi,
                     uint32_t width,
                     uint32_t height,
                     uint8_t vegetation_class,
                     size_t min_blob_pixels,
                     uint8_t *labels);

// Loads a checkpoint written by the `train` command. Returns null on
// failure; release with [`cw_network_free`].
//
// # Safety
// `path` must be null or a NUL-terminated string.
struct CwNetwork *cw_network_load(const char *path);

// Releases a network. Null is ignored.
//
// # Safety
// `net` must be null or a handle from [`cw_network_load`] not yet freed.
void cw_network_free(struct CwNetwork *net);

// Number of input planes the network expects (1: NIR; 2: NIR, Red;
// 3: NIR, Red, NDVI), or 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t cw_network_in_channels(const struct CwNetwork *net);

// Per-pixel class probabilities and labels for one frame.
//
// `bands` holds `channels` planes of `width * height` reflectance values in
// the order reported by [`cw_network_in_channels`]. `probs` receives
// `width * height * CW_NUM_CLASSES` values, pixel-major; `labels` (may be
// null) receives the most probable class per pixel.
//
// # Safety
// `net` must be a live handle and the buffers must have the sizes above.
int32_t cw_network_infer(const struct CwNetwork *net,
                         const double *bands,
                         size_t channels,
                         uint32_t width,
                         uint32_t height,
                         double *probs,
                         uint8_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROPWEED_H */
