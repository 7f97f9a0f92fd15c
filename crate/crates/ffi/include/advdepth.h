#ifndef ADVDEPTH_H
#define ADVDEPTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvdStatus {
  ADVD_STATUS_OK = 0,
  ADVD_STATUS_NULL_POINTER = 1,
  ADVD_STATUS_CONFIG = 2,
  ADVD_STATUS_DATA = 3,
  ADVD_STATUS_RUNTIME = 4,
  /*
   A buffer length or image size does not match.
   */
  ADVD_STATUS_SHAPE = 5,
  ADVD_STATUS_PANIC = 6,
} AdvdStatus;

/*
 A loaded generator.
 */
typedef struct AdvdGenerator AdvdGenerator;

/*
 Metrics over the valid pixels of one prediction.
 */
typedef struct AdvdMetrics {
  double rel;
  double rmse;
  double rmse_log;
  double log10;
  double delta1;
  double delta2;
  double delta3;
  uint64_t n_pixels;
} AdvdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or NULL. Valid until the
 next call into this library from the same thread.
 */
const char *advd_last_error(void);

/*
 Loads a generator from a network or training-state checkpoint.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdvdStatus advd_generator_load(const char *path, struct AdvdGenerator **out);

/*
 # Safety
 `g` must come from [`advd_generator_load`] and not be used afterwards.
 */
void advd_generator_free(struct AdvdGenerator *g);

/*
 Predicts depth in meters for `n` images of `height`×`width`.

 `images` holds `n*3*height*width` values, planar per image (all red, then
 green, then blue), preprocessed the way the model was trained.
 `depth` receives `n*height*width` values.

 # Safety
 Buffers must be valid for the stated lengths.
 */
enum AdvdStatus advd_generator_predict(const struct AdvdGenerator *g,
                                       const double *images,
                                       size_t n,
                                       size_t height,
                                       size_t width,
                                       double *depth,
                                       size_t depth_len);

/*
 Depth metrics over pixels where `mask` is nonzero.

 # Safety
 `pred`, `gt` and `mask` must each hold `len` elements.
 */
enum AdvdStatus advd_metrics(const double *pred,
                             const double *gt,
                             const uint8_t *mask,
                             size_t len,
                             struct AdvdMetrics *out);

/*
 Receptive field of each layer of the default patch discriminator.
 Writes at most `cap` values and stores the layer count in `count`.

 # Safety
 `out` must hold `cap` values; `count` must be valid.
 */
enum AdvdStatus advd_receptive_fields(size_t *out, size_t cap, size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVDEPTH_H */
