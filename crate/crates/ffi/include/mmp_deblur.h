#ifndef MMP_DEBLUR_H
#define MMP_DEBLUR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MmpStatus {
  MMP_STATUS_OK = 0,
  MMP_STATUS_NULL_POINTER = 1,
  MMP_STATUS_INVALID_ARGUMENT = 2,
  MMP_STATUS_IO = 3,
  MMP_STATUS_FORMAT = 4,
  MMP_STATUS_NON_FINITE = 5,
  MMP_STATUS_PANIC = 6,
} MmpStatus;

// A trained deblurring network (with its prior network when one was trained with it).
typedef struct MmpModel MmpModel;

// A standalone motion-magnitude estimator.
typedef struct MmpPriorNet MmpPriorNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mmp_version(void);

// Message of the last failure on this thread, or NULL. Valid until the next failing call on this thread.
const char *mmp_last_error(void);

// Loads a deblurring checkpoint. On success `*out` owns a handle to free with [`mmp_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MmpStatus mmp_model_load(const char *path, struct MmpModel **out);

// Releases a model; NULL is ignored.
//
// # Safety
// `model` must come from [`mmp_model_load`] and not be used afterwards.
void mmp_model_free(struct MmpModel *model);

// Frames per processing window; 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t mmp_model_window(const struct MmpModel *model);

// Whether the checkpoint embeds a prior network.
//
// # Safety
// `model` must be NULL or a live handle.
bool mmp_model_has_prior_net(const struct MmpModel *model);

// Deblurs `count ≥ 5` RGB frames. Writes `count − 4` restored frames (for
// input frames `2 … count − 3`) to `out`, which must hold
// `(count − 4)·3·height·width` floats.
//
// # Safety
// Pointers must be valid for the stated sizes.
enum MmpStatus mmp_model_deblur(const struct MmpModel *model,
                                const float *frames,
                                size_t count,
                                size_t height,
                                size_t width,
                                float *out,
                                size_t out_len);

// Estimates the motion-magnitude map of one RGB frame with the embedded prior network.
// `out` must hold `height·width` floats.
//
// # Safety
// Pointers must be valid for the stated sizes.
enum MmpStatus mmp_model_estimate_prior(const struct MmpModel *model,
                                        const float *frame,
                                        size_t height,
                                        size_t width,
                                        float *out);

// Loads an MMP-Net checkpoint (or the prior network embedded in a deblurring one).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MmpStatus mmp_prior_net_load(const char *path, struct MmpPriorNet **out);

// Releases a prior network; NULL is ignored.
//
// # Safety
// `net` must come from [`mmp_prior_net_load`] and not be used afterwards.
void mmp_prior_net_free(struct MmpPriorNet *net);

// Motion-magnitude map of one RGB frame; `out` must hold `height·width` floats.
//
// # Safety
// Pointers must be valid for the stated sizes.
enum MmpStatus mmp_prior_net_estimate(const struct MmpPriorNet *net,
                                      const float *frame,
                                      size_t height,
                                      size_t width,
                                      float *out);

// Ground-truth motion-magnitude map of a `frames`-frame window from its
// neighbour flows. `flows` holds `frames − 1` forward fields followed by
// `frames − 1` backward fields, each as a `u` plane then a `v` plane.
// `out` must hold `height·width` floats.
//
// # Safety
// Pointers must be valid for the stated sizes.
enum MmpStatus mmp_motion_prior(const float *flows,
                                size_t frames,
                                size_t height,
                                size_t width,
                                float k,
                                float *out);

// Per-pixel flow magnitude of one frame: the mean of the magnitudes of the
// flows toward its previous and next neighbours, or the single one given.
// Each flow is a `u` plane then a `v` plane; pass NULL for a missing
// neighbour. `out` must hold `height·width` floats.
//
// # Safety
// Non-NULL pointers must be valid for the stated sizes.
enum MmpStatus mmp_frame_magnitude(const float *to_prev,
                                   const float *to_next,
                                   size_t height,
                                   size_t width,
                                   float *out);

// PSNR in dB of two images of `len` floats; `+inf` when identical.
//
// # Safety
// `a` and `b` must hold `len` floats; `out` must be valid.
enum MmpStatus mmp_psnr(const float *a, const float *b, size_t len, double *out);

// PSNR in dB of a mean squared error on `[0, 1]` images.
double mmp_psnr_from_mse(double mse);

// Mean SSIM over channels of two `channels×height×width` images.
//
// # Safety
// `a` and `b` must hold `channels·height·width` floats; `out` must be valid.
enum MmpStatus mmp_ssim(const float *a,
                        const float *b,
                        size_t channels,
                        size_t height,
                        size_t width,
                        double *out);

// Charbonnier loss of two `channels×height×width` images (channel differences are summed per pixel).
//
// # Safety
// `target` and `output` must hold `channels·height·width` floats; `out` must be valid.
enum MmpStatus mmp_charbonnier(const float *target,
                               const float *output,
                               size_t channels,
                               size_t height,
                               size_t width,
                               double epsilon,
                               float *out);

// Image-gradient loss (forward differences) of two `channels×height×width` images.
//
// # Safety
// `target` and `output` must hold `channels·height·width` floats; `out` must be valid.
enum MmpStatus mmp_gradient_loss(const float *target,
                                 const float *output,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 float *out);

// `charbonnier + lambda1·gradient_loss` without the motion term (which needs a prior network).
//
// # Safety
// `target` and `output` must hold `channels·height·width` floats; `out` must be valid.
enum MmpStatus mmp_content_loss(const float *target,
                                const float *output,
                                size_t channels,
                                size_t height,
                                size_t width,
                                double lambda1,
                                double epsilon,
                                double *out);

// GMACs per `height×width` frame and parameter count of a recurrent network
// given as `A#B#C#F#`, with the default prior network added when `with_prior_net`.
//
// # Safety
// `tag` must be a NUL-terminated string; outputs must be valid.
enum MmpStatus mmp_rnn_complexity(const char *tag,
                                  bool mmam,
                                  bool ndf,
                                  bool with_prior_net,
                                  size_t height,
                                  size_t width,
                                  double *out_gmacs,
                                  size_t *out_params);

// GMACs per `height×width` frame and parameter count of the default prior network.
//
// # Safety
// Outputs must be valid.
enum MmpStatus mmp_prior_net_complexity(size_t height,
                                        size_t width,
                                        double *out_gmacs,
                                        size_t *out_params);

// Runs a command-line invocation in-process (`argv[0]` is the program name)
// and returns its exit code: 0 success, 1 usage error, 2 runtime failure.
//
// # Safety
// `argv` must hold `argc` NUL-terminated strings.
int mmp_run_cli(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMP_DEBLUR_H */
