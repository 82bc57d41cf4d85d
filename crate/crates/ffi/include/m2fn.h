#ifndef M2FN_H
#define M2FN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum M2fnStatus {
  M2FN_STATUS_OK = 0,
  M2FN_STATUS_NULL_POINTER = 1,
  M2FN_STATUS_INVALID_ARGUMENT = 2,
  M2FN_STATUS_IO = 3,
  M2FN_STATUS_FORMAT = 4,
  M2FN_STATUS_SHAPE = 5,
  M2FN_STATUS_CONFIG = 6,
  M2FN_STATUS_PANIC = 7,
} M2fnStatus;

/*
 Opaque model handle.
 */
typedef struct M2fnModel M2fnModel;

/*
 Static facts about a loaded model.
 */
typedef struct M2fnModelInfo {
  /*
   Square image side; images are `[3, image_size, image_size]`.
   */
  uintptr_t image_size;
  /*
   Width of one aux row (0 when aux is off).
   */
  uintptr_t dim_aux;
  /*
   Values per prediction: 1 for the scalar head, 10 for the
   distribution head.
   */
  uintptr_t outputs;
  /*
   Positions in an attention map (0 when attention is off).
   */
  uintptr_t attention_positions;
  /*
   Bit 0 aux, bit 1 low, bit 2 att, bit 3 high.
   */
  uint32_t toggles;
} M2fnModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *m2fn_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *m2fn_version(void);

/*
 Loads a checkpoint written by `m2fn train` (or `M2fn::save`). On success
 `*out` owns a handle to release with [`m2fn_model_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum M2fnStatus m2fn_model_load(const char *path, struct M2fnModel **out);

/*
 Releases a handle. NULL is ignored.

 # Safety
 `model` must come from [`m2fn_model_load`] and not be used afterwards.
 */
void m2fn_model_free(struct M2fnModel *model);

/*
 # Safety
 `model` and `info` must be valid pointers.
 */
enum M2fnStatus m2fn_model_info(const struct M2fnModel *model, struct M2fnModelInfo *info);

/*
 1 for a distribution head, 0 for a scalar head, -1 for NULL.

 # Safety
 `model` must be NULL or a valid handle.
 */
int32_t m2fn_model_is_distribution(const struct M2fnModel *model);

/*
 Eval-mode forward pass over `n` images.

 `images` holds `n * 3 * S * S` values (row-major `[N, 3, S, S]`), `aux`
 holds `n * dim_aux` values or is NULL when the model has no aux input.
 `out` receives `n * outputs` values. `attention` may be NULL; otherwise
 it receives `n * attention_positions` values (the model must have
 attention on).

 # Safety
 Every non-NULL buffer must be valid for the stated number of values.
 */
enum M2fnStatus m2fn_model_predict(const struct M2fnModel *model,
                                   const double *images,
                                   uintptr_t n,
                                   const double *aux,
                                   double *out,
                                   double *attention);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* M2FN_H */
