#ifndef SADA_H
#define SADA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result codes shared by every function.
 */
typedef enum SadaStatus {
  SADA_STATUS_OK = 0,
  SADA_STATUS_NULL_POINTER = 1,
  SADA_STATUS_INVALID_INPUT = 2,
  SADA_STATUS_SHAPE_MISMATCH = 3,
  /*
   Missing file, bad configuration or missing sensitivity map.
   */
  SADA_STATUS_CONFIG = 4,
  SADA_STATUS_IO = 5,
  SADA_STATUS_PARSE = 6,
  /*
   Output buffer length differs from the required length.
   */
  SADA_STATUS_BUFFER_SIZE = 7,
  SADA_STATUS_RUNTIME = 8,
  SADA_STATUS_PANIC = 9,
} SadaStatus;

/*
 A loaded sensitivity map.
 */
typedef struct SadaMap SadaMap;

/*
 A loaded ConvNet checkpoint.
 */
typedef struct SadaModel SadaModel;

/*
 Amplitude and phase spectra of one image.
 */
typedef struct SadaSpectrum SadaSpectrum;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null after a success.
 The pointer stays valid until the next call into this library on the
 same thread.
 */
const char *sada_last_error_message(void);

/*
 Amplitude/phase decomposition of an image of `channels*height*width`
 pixels. The handle in `*out` must be released with [`sada_spectrum_free`].

 # Safety
 `pixels` must point to `channels*height*width` doubles; `out` must be a
 writable pointer.
 */
enum SadaStatus sada_decompose(const double *pixels,
                               uintptr_t channels,
                               uintptr_t height,
                               uintptr_t width,
                               struct SadaSpectrum **out);

/*
 # Safety
 `spectrum` must be null or a handle from [`sada_decompose`] not yet freed.
 */
void sada_spectrum_free(struct SadaSpectrum *spectrum);

/*
 Writes `channels*height*width` amplitudes (centered layout) to `out`.

 # Safety
 `spectrum` must be a live handle; `out` must hold `len` doubles.
 */
enum SadaStatus sada_spectrum_amplitude(const struct SadaSpectrum *spectrum,
                                        double *out,
                                        uintptr_t len);

/*
 Writes the phases (radians) to `out`.

 # Safety
 `spectrum` must be a live handle; `out` must hold `len` doubles.
 */
enum SadaStatus sada_spectrum_phase(const struct SadaSpectrum *spectrum,
                                    double *out,
                                    uintptr_t len);

/*
 Replaces the amplitudes. Values must be finite and nonnegative, and
 conjugate bins must stay equal for the reconstruction to be exact.

 # Safety
 `spectrum` must be a live handle; `amplitude` must hold `len` doubles.
 */
enum SadaStatus sada_spectrum_set_amplitude(struct SadaSpectrum *spectrum,
                                            const double *amplitude,
                                            uintptr_t len);

/*
 Inverse transform of the spectrum into `out` (`channels*height*width`
 doubles, not clamped).

 # Safety
 `spectrum` must be a live handle; `out` must hold `len` doubles.
 */
enum SadaStatus sada_reconstruct(const struct SadaSpectrum *spectrum, double *out, uintptr_t len);

/*
 Unit-norm Fourier basis image of centered frequency `(i, j)` on a
 `height x width` grid, written to `out` (`height*width` doubles).

 # Safety
 `out` must hold `len` doubles.
 */
enum SadaStatus sada_basis_image(int64_t i,
                                 int64_t j,
                                 uintptr_t height,
                                 uintptr_t width,
                                 double *out,
                                 uintptr_t len);

/*
 Jensen-Shannon divergence (natural log) of `n_dists` probability vectors
 of `n_classes` entries each, stored row-major in `probs`.

 # Safety
 `probs` must hold `n_dists*n_classes` doubles; `out` must be writable.
 */
enum SadaStatus sada_js_divergence(const double *probs,
                                   uintptr_t n_dists,
                                   uintptr_t n_classes,
                                   double *out);

/*
 Loads a checkpoint written by `sada train`.

 # Safety
 `path` must be a nul-terminated UTF-8 string; `out` must be writable.
 */
enum SadaStatus sada_model_load(const char *path, struct SadaModel **out);

/*
 # Safety
 `model` must be null or a handle from [`sada_model_load`] not yet freed.
 */
void sada_model_free(struct SadaModel *model);

/*
 Input shape and class count of a model.

 # Safety
 `model` must be a live handle; the out pointers must be writable.
 */
enum SadaStatus sada_model_info(const struct SadaModel *model,
                                uintptr_t *channels,
                                uintptr_t *height,
                                uintptr_t *width,
                                uintptr_t *classes);

/*
 Class probabilities of `n_images` images into `out`
 (`n_images*classes` doubles, row-major).

 # Safety
 `model` must be a live handle; `pixels` must hold `n_images` images of
 the model's input size; `out` must hold `len` doubles.
 */
enum SadaStatus sada_model_predict_proba(const struct SadaModel *model,
                                         const double *pixels,
                                         uintptr_t n_images,
                                         double *out,
                                         uintptr_t len);

/*
 Cross-entropy of one image for `label` and its gradient with respect to
 the pixels.

 # Safety
 `model` must be a live handle; `pixels` and `grad` must hold one image
 (`len` doubles); `loss` must be writable.
 */
enum SadaStatus sada_model_pixel_gradient(const struct SadaModel *model,
                                          const double *pixels,
                                          uintptr_t label,
                                          double *loss,
                                          double *grad,
                                          uintptr_t len);

/*
 Loads `<dir>/<stem>.csv` and its JSON sidecar.

 # Safety
 `dir` and `stem` must be nul-terminated UTF-8 strings; `out` writable.
 */
enum SadaStatus sada_map_load(const char *dir, const char *stem, struct SadaMap **out);

/*
 # Safety
 `map` must be null or a handle from [`sada_map_load`] not yet freed.
 */
void sada_map_free(struct SadaMap *map);

/*
 Grid size, values (row-major, `height*width`) and l1 summary of a map.
 `values` may be null to query only the size and summary.

 # Safety
 `map` must be a live handle; non-null pointers must be writable, and
 `values` must hold `len` doubles.
 */
enum SadaStatus sada_map_values(const struct SadaMap *map,
                                uintptr_t *height,
                                uintptr_t *width,
                                double *l1,
                                double *values,
                                uintptr_t len);

/*
 One SADA augmentation of an image with the given hyperparameters
 (random init `epsilon`, step `delta`, at most `steps` steps), seeded by
 `seed`. Writes the augmented image to `out` and whether the model's
 prediction changed to `prediction_changed` (0 or 1).

 # Safety
 Handles must be live; `pixels` and `out` must hold one image (`len`
 doubles); `prediction_changed` must be writable.
 */
enum SadaStatus sada_augment(const struct SadaModel *model,
                             const struct SadaMap *map,
                             const double *pixels,
                             uintptr_t label,
                             double epsilon,
                             double delta,
                             uintptr_t steps,
                             uint64_t seed,
                             double *out,
                             uintptr_t len,
                             int32_t *prediction_changed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SADA_H */
