#ifndef ADVDIFF_H
#define ADVDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvdiffStatus {
  ADVDIFF_STATUS_OK = 0,
  ADVDIFF_STATUS_NULL_POINTER = -1,
  ADVDIFF_STATUS_INVALID_ARGUMENT = -2,
  ADVDIFF_STATUS_CONFIG = -3,
  ADVDIFF_STATUS_NUMERIC = -4,
  ADVDIFF_STATUS_IO = -5,
  ADVDIFF_STATUS_PANIC = -6,
} AdvdiffStatus;

// Trained model handle.
typedef struct AdvdiffModel AdvdiffModel;

// Variance schedule handle.
typedef struct AdvdiffSchedule AdvdiffSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length plus one, so a
// caller can size the buffer with a first call passing `len = 0`.
size_t advdiff_last_error_message(char *buf, size_t len);

// Linear variance schedule over `steps` steps. Non-positive endpoints select
// the defaults `0.1/T` and `20/T`.
enum AdvdiffStatus advdiff_schedule_new_linear(size_t steps,
                                               double sigma_min,
                                               double sigma_max,
                                               struct AdvdiffSchedule **out);

void advdiff_schedule_free(struct AdvdiffSchedule *schedule);

enum AdvdiffStatus advdiff_schedule_steps(const struct AdvdiffSchedule *schedule, size_t *out);

// `ᾱ_t` for `0 ≤ t ≤ T`.
enum AdvdiffStatus advdiff_schedule_alpha_bar(const struct AdvdiffSchedule *schedule,
                                              size_t t,
                                              double *out);

// Perturbation ray `r_β(t)` for the given `ω` and `γ`.
enum AdvdiffStatus advdiff_ray(const struct AdvdiffSchedule *schedule,
                               double omega,
                               double gamma,
                               size_t t,
                               double beta,
                               double *out);

// Loads a checkpoint from its JSON manifest path.
enum AdvdiffStatus advdiff_model_load(const char *path, struct AdvdiffModel **out);

void advdiff_model_free(struct AdvdiffModel *model);

enum AdvdiffStatus advdiff_model_data_dim(const struct AdvdiffModel *model, size_t *out);

// `ε_θ(x, t)` for `rows` model-space inputs; writes `rows × D` values.
enum AdvdiffStatus advdiff_model_predict_eps(const struct AdvdiffModel *model,
                                             const double *x,
                                             size_t rows,
                                             size_t t,
                                             double *out);

// Draws `n` data-space generations with the full reverse chain; writes
// `n × D` values. `ancestral != 0` injects noise, otherwise `z = 0`.
enum AdvdiffStatus advdiff_model_sample(const struct AdvdiffModel *model,
                                        size_t n,
                                        uint64_t seed,
                                        int ancestral,
                                        double *out);

// Distance of each row of `x` (`rows × dim`) to the affine subspace
// `mean + span(basis)`, with `basis` holding `k` orthonormal rows.
enum AdvdiffStatus advdiff_rho(const double *x,
                               size_t rows,
                               size_t dim,
                               const double *basis,
                               size_t k,
                               const double *mean,
                               double *out);

// `|⟨normal, x⟩ − offset| / ‖normal‖` per row.
enum AdvdiffStatus advdiff_plane_distance(const double *x,
                                          size_t rows,
                                          size_t dim,
                                          const double *normal,
                                          double offset,
                                          double *out);

// PSNR of `x` against `reference`, both of length `len`, for signal peak
// `peak`. Identical inputs give `+inf`.
enum AdvdiffStatus advdiff_psnr(const double *x,
                                const double *reference,
                                size_t len,
                                double peak,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVDIFF_H */
