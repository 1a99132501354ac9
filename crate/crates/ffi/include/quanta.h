#ifndef QUANTA_H
#define QUANTA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum QuantaStatus {
  QUANTA_STATUS_OK = 0,
  QUANTA_STATUS_NULL_POINTER = 1,
  QUANTA_STATUS_INVALID_ARGUMENT = 2,
  QUANTA_STATUS_DIMENSION_MISMATCH = 3,
  QUANTA_STATUS_PLAN_VALIDATION = 4,
  QUANTA_STATUS_CONTRACTION = 5,
  QUANTA_STATUS_NON_FINITE = 6,
  QUANTA_STATUS_FORMAT = 7,
  QUANTA_STATUS_IO = 8,
  QUANTA_STATUS_BUFFER_TOO_SMALL = 9,
  QUANTA_STATUS_PANIC = 10,
} QuantaStatus;

/**
 * Opaque plan handle.
 */
typedef struct QuantaPlan QuantaPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *quanta_last_error_message(void);

/**
 * Builds a square plan over `dims[0..n_dims]` with the all-pairs layout
 * repeated `rounds` times and Gaussian gates.
 *
 * # Safety
 * `dims` must point to `n_dims` values and `out` must be writable.
 */
enum QuantaStatus quanta_plan_build_all_pairs(const size_t *dims,
                                              size_t n_dims,
                                              size_t rounds,
                                              uint64_t seed,
                                              double init_scale,
                                              struct QuantaPlan **out);

/**
 * Loads the first plan record of a QTF file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` must be writable.
 */
enum QuantaStatus quanta_plan_load(const char *path, struct QuantaPlan **out);

/**
 * Writes the plan as a single-record QTF file.
 *
 * # Safety
 * `plan` must be a live handle and `path` a NUL-terminated string.
 */
enum QuantaStatus quanta_plan_save(const struct QuantaPlan *plan, const char *path);

/**
 * Releases a plan. NULL is ignored.
 *
 * # Safety
 * `plan` must be NULL or a handle not yet freed.
 */
void quanta_plan_free(struct QuantaPlan *plan);

/**
 * Zero for a NULL handle.
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
size_t quanta_plan_input_len(const struct QuantaPlan *plan);

/**
 * Zero for a NULL handle.
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
size_t quanta_plan_output_len(const struct QuantaPlan *plan);

/**
 * Zero for a NULL handle.
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
size_t quanta_plan_gate_count(const struct QuantaPlan *plan);

/**
 * Trainable parameters. Zero for a NULL handle.
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
size_t quanta_plan_param_count(const struct QuantaPlan *plan);

/**
 * Applies the plan to `batch` row-major vectors of length `input_len`,
 * writing `batch * output_len` values to `out`.
 *
 * # Safety
 * `xs` must hold `batch * input_len` values and `out` `out_len` values.
 */
enum QuantaStatus quanta_plan_apply(const struct QuantaPlan *plan,
                                    const double *xs,
                                    size_t batch,
                                    double *out,
                                    size_t out_len);

/**
 * Writes the dense `output_len x input_len` operator, row-major.
 *
 * # Safety
 * `out` must hold `out_len` values.
 */
enum QuantaStatus quanta_plan_materialize(const struct QuantaPlan *plan,
                                          double *out,
                                          size_t out_len);

/**
 * Einsum expression applying an all-pairs plan over `n_axes` axes to a
 * batched input. Free the result with [`quanta_string_free`].
 *
 * # Safety
 * `out` must be writable.
 */
enum QuantaStatus quanta_gen_apply_expr(size_t n_axes, char **out);

/**
 * Einsum expression for the full operator of an all-pairs plan.
 *
 * # Safety
 * `out` must be writable.
 */
enum QuantaStatus quanta_gen_operator_expr(size_t n_axes, char **out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must be NULL or a string from this library not yet freed.
 */
void quanta_string_free(char *s);

/**
 * Numerical rank of a row-major `rows x cols` matrix. Singular values
 * at or below `tolerance * max(rows, cols) * sigma_max` are dropped.
 *
 * # Safety
 * `data` must hold `rows * cols` values and `rank` must be writable.
 */
enum QuantaStatus quanta_numerical_rank(const double *data,
                                        size_t rows,
                                        size_t cols,
                                        double tolerance,
                                        size_t *rank);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUANTA_H */
