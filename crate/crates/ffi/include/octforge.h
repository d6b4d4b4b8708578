#ifndef OCTFORGE_H
#define OCTFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Side of the square crops accepted by the CDI/SI entry points.
 */
#define OCTF_CROP 128

typedef enum OctfStatus {
  OCTF_STATUS_OK = 0,
  OCTF_STATUS_NULL_POINTER = 1,
  OCTF_STATUS_INVALID_ARGUMENT = 2,
  OCTF_STATUS_SHAPE = 3,
  OCTF_STATUS_DATA = 4,
  OCTF_STATUS_IO = 5,
  OCTF_STATUS_FORMAT = 6,
  OCTF_STATUS_NON_FINITE = 7,
  OCTF_STATUS_INVARIANT = 8,
  OCTF_STATUS_BUFFER_TOO_SMALL = 9,
  OCTF_STATUS_PANIC = 10,
} OctfStatus;

/**
 * Opaque detector loaded from a training checkpoint.
 */
typedef struct OctfDetector OctfDetector;

/**
 * Per-image result of [`octf_detector_predict`].
 */
typedef struct OctfVerdict {
  /**
   * 1 when any crop is classified fake.
   */
  int32_t is_fake;
  uint32_t crops;
  float max_fake_probability;
  float mean_cdi_weight;
  float mean_si_weight;
} OctfVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *octf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *octf_version(void);

/**
 * Channel-difference image of a 128x128 interleaved RGB crop, written as
 * three planes (R-G, B-G, R-B) of `128*128` floats.
 *
 * # Safety
 * `rgb` must point to `height*width*3` bytes and `out` to `out_len` floats.
 */
enum OctfStatus octf_compute_cdi(const uint8_t *rgb,
                                 size_t height,
                                 size_t width,
                                 float *out,
                                 size_t out_len);

/**
 * Min-max scaled, centered log spectrum of a 128x128 crop (`128*128` floats).
 *
 * # Safety
 * `rgb` must point to `height*width*3` bytes and `out` to `out_len` floats.
 */
enum OctfStatus octf_compute_si(const uint8_t *rgb,
                                size_t height,
                                size_t width,
                                float *out,
                                size_t out_len);

/**
 * High-frequency energy fraction of the R-G difference plane of an image.
 *
 * # Safety
 * `rgb` must point to `height*width*3` bytes; `out` must be writable.
 */
enum OctfStatus octf_cdi_hf_energy(const uint8_t *rgb, size_t height, size_t width, double *out);

/**
 * Mean-embedding distance between domains. `features` is row-major
 * `[rows, dim]`; `domains[i]` is the domain id of row `i`.
 *
 * # Safety
 * `features` must hold `rows*dim` doubles, `domains` `rows` ids.
 */
enum OctfStatus octf_mmd(const double *features,
                         const uint32_t *domains,
                         size_t rows,
                         size_t dim,
                         double *out);

/**
 * Loads a checkpoint written by `octforge train`. Release with
 * [`octf_detector_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum OctfStatus octf_detector_load(const char *path, struct OctfDetector **out);

/**
 * # Safety
 * `detector` must come from [`octf_detector_load`] and not be used afterwards.
 */
void octf_detector_free(struct OctfDetector *detector);

/**
 * Classifies an RGB image of any size >= 128x128 with the any-crop rule.
 *
 * # Safety
 * `detector` must be live, `rgb` must hold `height*width*3` bytes and `out`
 * must be writable.
 */
enum OctfStatus octf_detector_predict(const struct OctfDetector *detector,
                                      const uint8_t *rgb,
                                      size_t height,
                                      size_t width,
                                      struct OctfVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCTFORGE_H */
