#ifndef GAITLU_H
#define GAITLU_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum GaitluStatus {
  GAITLU_STATUS_OK = 0,
  // A required pointer argument was null.
  GAITLU_STATUS_NULL_POINTER = 1,
  // Bad argument, shape or configuration.
  GAITLU_STATUS_INVALID_ARGUMENT = 2,
  // Unreadable or malformed input data.
  GAITLU_STATUS_DATA_ERROR = 3,
  // Degenerate geometry or a numeric failure.
  GAITLU_STATUS_NUMERIC_ERROR = 4,
  // The library panicked; the handle involved should be discarded.
  GAITLU_STATUS_PANIC = 5,
} GaitluStatus;

// Opaque generator handle.
typedef struct GaitluLugan GaitluLugan;

// Opaque recognizer handle.
typedef struct GaitluRecognizer GaitluRecognizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Null-terminated message of the last failure on this thread, or "" after a
// success. Valid until the next call on the same thread.
const char *gaitlu_last_error(void);

// Library version as a static null-terminated string.
const char *gaitlu_version(void);

// Least-squares transform between two row-major 3x4 projection matrices.
// Writes the row-major 3x3 `q_out` and, if non-null, the fit residual.
//
// # Safety
// `m_a` and `m_b` must point to 12 doubles and `q_out` to 9.
enum GaitluStatus gaitlu_oracle_transform(const double *m_a,
                                          const double *m_b,
                                          double *q_out,
                                          double *residual_out);

// Applies a row-major 3x3 transform to every joint of a pose sequence.
//
// # Safety
// `q` must point to 9 doubles; `xy` and `xy_out` to `2 * frames * joints`.
enum GaitluStatus gaitlu_apply_transform(const double *q,
                                         const double *xy,
                                         size_t frames,
                                         size_t joints,
                                         double *xy_out);

// Normalized adjacency of the COCO-17 hypergraph of the given order (1 bone
// graph, 2 parts, 3 body halves), written row-major into a 17x17 buffer.
//
// # Safety
// `out` must point to `len` doubles.
enum GaitluStatus gaitlu_adjacency(uint8_t order, double *out, size_t len);

// Supervised contrastive loss of `n` L2-normalized `d`-dimensional rows.
// When `grad_out` is non-null it receives the `n x d` gradient.
//
// # Safety
// `features` and `grad_out` must point to `n * d` doubles, `labels` to `n`.
enum GaitluStatus gaitlu_supcon_loss(const double *features,
                                     const size_t *labels,
                                     size_t n,
                                     size_t d,
                                     double tau,
                                     double *loss_out,
                                     double *grad_out);

// Loads a generator checkpoint into a new handle.
//
// # Safety
// `path` must be a null-terminated string and `out` a valid pointer.
enum GaitluStatus gaitlu_lugan_load(const char *path_c, struct GaitluLugan **out);

// Releases a generator handle. Null is ignored.
//
// # Safety
// `h` must come from [`gaitlu_lugan_load`] and not be used afterwards.
void gaitlu_lugan_free(struct GaitluLugan *h);

// Generates the sequence seen from view `beta_degrees`. Writes the pose into
// `xy_out` and, if non-null, the row-major pixel-space transform into `q_out`.
//
// # Safety
// Buffers must hold `2 * frames * joints` (`xy`, `xy_out`),
// `frames * joints` (`conf`, may be null) and 9 (`q_out`) doubles.
enum GaitluStatus gaitlu_lugan_generate(const struct GaitluLugan *h,
                                        const double *xy,
                                        const double *conf,
                                        size_t frames,
                                        size_t joints,
                                        double beta_degrees,
                                        double *xy_out,
                                        double *q_out);

// Loads a recognizer checkpoint into a new handle.
//
// # Safety
// `path` must be a null-terminated string and `out` a valid pointer.
enum GaitluStatus gaitlu_recognizer_load(const char *path_c, struct GaitluRecognizer **out);

// Releases a recognizer handle. Null is ignored.
//
// # Safety
// `h` must come from [`gaitlu_recognizer_load`] and not be used afterwards.
void gaitlu_recognizer_free(struct GaitluRecognizer *h);

// Embedding length and the number of view sequences the recognizer expects
// (zero for the single-view baseline).
//
// # Safety
// `h` must be a live handle; the outputs may be null.
enum GaitluStatus gaitlu_recognizer_info(const struct GaitluRecognizer *h,
                                         size_t *embedding_dim,
                                         size_t *view_count);

// Embeds a source sequence. `views_xy` holds `view_count` sequences of the
// same shape, one per configured view, laid out back to back.
//
// # Safety
// `xy` must hold `2 * frames * joints` doubles, `views_xy` that times
// `view_count` (may be null when zero) and `out` `out_len` doubles.
enum GaitluStatus gaitlu_recognizer_embed(const struct GaitluRecognizer *h,
                                          const double *xy,
                                          size_t frames,
                                          size_t joints,
                                          const double *views_xy,
                                          size_t view_count,
                                          double *out,
                                          size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAITLU_H */
