#ifndef UTOPY_H
#define UTOPY_H

/* Generated from the utopy-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result class of an FFI call.
 */
typedef enum utopy_status {
  UTOPY_OK = 0,
  /**
   * A documented precondition was violated (shape, range, state).
   */
  UTOPY_CONTRACT = 1,
  /**
   * Invalid configuration or descriptor contents.
   */
  UTOPY_CONFIG = 2,
  /**
   * A computation produced NaN/Inf or diverged.
   */
  UTOPY_NUMERIC = 3,
  /**
   * An iterative routine hit its iteration budget.
   */
  UTOPY_NON_CONVERGENCE = 4,
  /**
   * A certified-contraction precondition does not hold.
   */
  UTOPY_PRECONDITION = 5,
  /**
   * A required artifact is not staged on disk.
   */
  UTOPY_MISSING_PREREQUISITE = 6,
  UTOPY_IO = 7,
  UTOPY_JSON = 8,
  /**
   * A required pointer argument was null.
   */
  UTOPY_NULL_ARGUMENT = 9,
  /**
   * A buffer length disagrees with the handle's dimensions.
   */
  UTOPY_BAD_LENGTH = 10,
  /**
   * A string argument was not valid UTF-8.
   */
  UTOPY_UTF8 = 11,
  /**
   * A panic was caught at the boundary.
   */
  UTOPY_PANIC = 12,
} utopy_status;

/**
 * Trained unrolled solver loaded from a checkpoint directory.
 */
typedef struct UtopyModel UtopyModel;

/**
 * Measurement operator rebuilt from a JSON descriptor.
 */
typedef struct UtopyOperator UtopyOperator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static NUL-terminated string.
 */
const char *utopy_version(void);

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; the string is empty
 * if nothing failed yet.
 */
const char *utopy_last_error(void);

/**
 * Load a checkpoint directory (as written by the trainer) into a model
 * handle stored in `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum utopy_status utopy_model_load(const char *path, struct UtopyModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer from [`utopy_model_load`], freed once.
 */
void utopy_model_free(struct UtopyModel *model);

/**
 * Number of unrolled stages, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t utopy_model_stages(const struct UtopyModel *model);

/**
 * Reconstruction length in doubles (side²), or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t utopy_model_output_len(const struct UtopyModel *model);

/**
 * Rebuild an operator from its JSON descriptor into a handle stored in
 * `out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum utopy_status utopy_operator_from_descriptor(const char *json, struct UtopyOperator **out);

/**
 * Release an operator handle. Null is a no-op.
 *
 * # Safety
 * `op` must be null or a pointer from [`utopy_operator_from_descriptor`],
 * freed once.
 */
void utopy_operator_free(struct UtopyOperator *op);

/**
 * Signal length the operator consumes, or 0 for a null handle.
 *
 * # Safety
 * `op` must be null or a live operator handle.
 */
size_t utopy_operator_input_len(const struct UtopyOperator *op);

/**
 * Measurement length the operator produces, or 0 for a null handle.
 *
 * # Safety
 * `op` must be null or a live operator handle.
 */
size_t utopy_operator_output_len(const struct UtopyOperator *op);

/**
 * Apply the operator: `y = H x` with `x_len == input_len` and
 * `y_len == output_len`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum utopy_status utopy_operator_apply(const struct UtopyOperator *op,
                                       const double *x,
                                       size_t x_len,
                                       double *y,
                                       size_t y_len);

/**
 * Apply the adjoint: `x = Hᵀ y` with `y_len == output_len` and
 * `x_len == input_len`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum utopy_status utopy_operator_adjoint(const struct UtopyOperator *op,
                                         const double *y,
                                         size_t y_len,
                                         double *x,
                                         size_t x_len);

/**
 * Reconstruct one signal from its measurements using the trained model on
 * the target fidelity alone. `y_len` must equal the operator's output
 * length and `x_len` the model's output length; the operator's input length
 * must match the model, too.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum utopy_status utopy_reconstruct(const struct UtopyModel *model,
                                    const struct UtopyOperator *op,
                                    const double *y,
                                    size_t y_len,
                                    double *x,
                                    size_t x_len);

/**
 * Peak signal-to-noise ratio between two equal-length buffers, written to
 * `out`.
 *
 * # Safety
 * `a` and `b` must be valid for `len` doubles and `out` for one double.
 */
enum utopy_status utopy_psnr(const double *a,
                             const double *b,
                             size_t len,
                             double peak,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UTOPY_H */
