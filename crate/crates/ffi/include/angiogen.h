#ifndef ANGIOGEN_H
#define ANGIOGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum AngiogenStatus {
  ANGIOGEN_STATUS_OK = 0,
  ANGIOGEN_STATUS_NULL_POINTER = 1,
  ANGIOGEN_STATUS_INVALID_ARGUMENT = 2,
  ANGIOGEN_STATUS_IO = 3,
  ANGIOGEN_STATUS_FORMAT = 4,
  ANGIOGEN_STATUS_MISSING_PREREQUISITE = 5,
  ANGIOGEN_STATUS_NUMERICAL = 6,
  ANGIOGEN_STATUS_TENSOR = 7,
  ANGIOGEN_STATUS_BUFFER_TOO_SMALL = 8,
  ANGIOGEN_STATUS_PANIC = 9,
} AngiogenStatus;

typedef enum AngiogenPhase {
  ANGIOGEN_PHASE_VAE = 0,
  ANGIOGEN_PHASE_GCE = 1,
  ANGIOGEN_PHASE_DIFFUSION_EARLY = 2,
  ANGIOGEN_PHASE_DIFFUSION_LATE = 3,
} AngiogenPhase;

/**
 * Run configuration handle.
 */
typedef struct AngiogenConfig AngiogenConfig;

/**
 * Loaded autoencoder and late-stage diffusion model.
 */
typedef struct AngiogenGenerator AngiogenGenerator;

typedef struct AngiogenPreprocessSummary {
  size_t n_samples;
  size_t n_registered;
  size_t n_failed;
  /**
   * NaN when not measured.
   */
  double mean_corner_error;
  /**
   * NaN when not measured.
   */
  double accurate_fraction;
} AngiogenPreprocessSummary;

/**
 * Monte-Carlo statistics of one noise kind.
 */
typedef struct AngiogenNoiseStats {
  size_t draws;
  double per_pixel_variance;
  double spatial_mean_variance;
  double inter_pixel_covariance;
  double dc_power;
} AngiogenNoiseStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *angiogen_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *angiogen_last_error_message(void);

/**
 * Creates a configuration holding the built-in defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum AngiogenStatus angiogen_config_default(struct AngiogenConfig **out);

/**
 * Loads a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AngiogenStatus angiogen_config_load(const char *path, struct AngiogenConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum AngiogenStatus angiogen_config_set_seed(struct AngiogenConfig *cfg, uint64_t seed);

/**
 * Writes the 16-digit hex configuration hash plus a NUL into `buf`, which
 * must hold at least 17 bytes.
 *
 * # Safety
 * `cfg` must be a live handle and `buf` writable for `len` bytes.
 */
enum AngiogenStatus angiogen_config_hash(const struct AngiogenConfig *cfg, char *buf, size_t len);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void angiogen_config_free(struct AngiogenConfig *cfg);

/**
 * Writes a synthetic dataset of the configured size to `out_dir`. A null
 * `cfg` uses the defaults.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum AngiogenStatus angiogen_synth_dataset(const struct AngiogenConfig *cfg, const char *out_dir);

/**
 * Sharpens conditions and registers late frames in place.
 *
 * # Safety
 * `data_dir` must be a NUL-terminated string; `summary` may be null.
 */
enum AngiogenStatus angiogen_preprocess_dataset(const struct AngiogenConfig *cfg,
                                                const char *data_dir,
                                                struct AngiogenPreprocessSummary *summary);

/**
 * Trains one phase, writing its checkpoint into `run_dir` and appending to
 * the run manifest. Phases must be trained in order.
 *
 * # Safety
 * `data_dir` and `run_dir` must be NUL-terminated strings.
 */
enum AngiogenStatus angiogen_train(const struct AngiogenConfig *cfg,
                                   enum AngiogenPhase phase,
                                   const char *data_dir,
                                   const char *run_dir);

/**
 * Loads the trained models from `run_dir` for sampling.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `out` must be writable.
 */
enum AngiogenStatus angiogen_generator_open(const struct AngiogenConfig *cfg,
                                            const char *run_dir,
                                            struct AngiogenGenerator **out);

/**
 * Generates one late-phase image from a `3 × h × w` condition into the
 * `h × w` buffer `out`. Deterministic in `seed`.
 *
 * # Safety
 * `condition` must be readable for `3*h*w` floats and `out` writable for
 * `h*w` floats.
 */
enum AngiogenStatus angiogen_generator_generate(const struct AngiogenGenerator *gen,
                                                const float *condition,
                                                size_t h,
                                                size_t w,
                                                uint64_t seed,
                                                float *out);

/**
 * # Safety
 * `gen` must be null or a handle not yet freed.
 */
void angiogen_generator_free(struct AngiogenGenerator *gen);

/**
 * PSNR in dB; identical images give positive infinity.
 *
 * # Safety
 * `a` and `b` must be readable for `h*w` floats.
 */
enum AngiogenStatus angiogen_psnr(const float *a,
                                  const float *b,
                                  size_t h,
                                  size_t w,
                                  double max_val,
                                  double *out);

/**
 * MS-SSIM over `scales` scales (at most 5, limited by the image size).
 *
 * # Safety
 * `a` and `b` must be readable for `h*w` floats.
 */
enum AngiogenStatus angiogen_ms_ssim(const float *a,
                                     const float *b,
                                     size_t h,
                                     size_t w,
                                     size_t scales,
                                     double *out);

/**
 * Fréchet distance between two feature sets stored row-major as
 * `n_real × dim` and `n_fake × dim`.
 *
 * # Safety
 * `real` and `fake` must be readable for the stated number of doubles.
 */
enum AngiogenStatus angiogen_fid(const double *real,
                                 size_t n_real,
                                 const double *fake,
                                 size_t n_fake,
                                 size_t dim,
                                 double *out);

/**
 * Monte-Carlo noise statistics over `draws` samples of an `h × w` field,
 * plain Gaussian or low-frequency enhanced.
 *
 * # Safety
 * `out` must be writable.
 */
enum AngiogenStatus angiogen_noise_stats(size_t h,
                                         size_t w,
                                         size_t draws,
                                         uint64_t seed,
                                         double beta_std,
                                         bool enhanced,
                                         struct AngiogenNoiseStats *out);

/**
 * Evaluates generated images against a dataset's test split and returns the
 * metric report as a JSON string, to be released with
 * [`angiogen_string_free`].
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out_json` must be writable.
 */
enum AngiogenStatus angiogen_evaluate(const struct AngiogenConfig *cfg,
                                      const char *data_dir,
                                      const char *generated_dir,
                                      char **out_json);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void angiogen_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANGIOGEN_H */
