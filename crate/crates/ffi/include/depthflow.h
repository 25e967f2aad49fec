#ifndef DEPTHFLOW_H
#define DEPTHFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_ARGUMENT = 1,
  DF_STATUS_INVALID_INPUT = 2,
  DF_STATUS_DIMENSION = 3,
  DF_STATUS_FORMAT = 4,
  DF_STATUS_VERSION = 5,
  DF_STATUS_IO = 6,
  DF_STATUS_CONFIG = 7,
  DF_STATUS_NUMERIC = 8,
  DF_STATUS_PANIC = 9,
} DfStatus;

/**
 * Sample-space scorer selector for [`df_scout_and_refine`].
 */
typedef enum {
  DF_SCORER_ORACLE = 0,
  DF_SCORER_NEAREST_MEAN = 1,
  DF_SCORER_PRIOR_SHELL = 2,
} DfScorer;

/**
 * Gaussian mixture used by the sample-space scorers.
 */
typedef struct DfMixture DfMixture;

/**
 * Shared-block student.
 */
typedef struct DfStudent DfStudent;

/**
 * One-step flow-map teacher.
 */
typedef struct DfTeacher DfTeacher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *df_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *df_version(void);

/**
 * Loads a flow-map checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
DfStatus df_teacher_load(const char *path, DfTeacher **out);

/**
 * # Safety
 * `teacher` must come from [`df_teacher_load`] and not be freed twice.
 */
void df_teacher_free(DfTeacher *teacher);

/**
 * Data dimension of the teacher, or 0 for a null handle.
 *
 * # Safety
 * `teacher` must be null or a live handle.
 */
uintptr_t df_teacher_data_dim(const DfTeacher *teacher);

/**
 * Loads a student checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
DfStatus df_student_load(const char *path, DfStudent **out);

/**
 * # Safety
 * `student` must come from [`df_student_load`] and not be freed twice.
 */
void df_student_free(DfStudent *student);

/**
 * Equal-weight ring of `components` 2-D Gaussians.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
DfStatus df_mixture_ring(uintptr_t components, double radius, double scale, DfMixture **out);

/**
 * # Safety
 * `mixture` must come from [`df_mixture_ring`] and not be freed twice.
 */
void df_mixture_free(DfMixture *mixture);

/**
 * Teacher one-step samples for `n` row-major noises of width `dim`, all
 * with class `label` and guidance `w`. Writes `n * dim` floats to `out`.
 *
 * # Safety
 * `z` must hold `n * dim` floats and `out` room for as many.
 */
DfStatus df_teacher_sample(const DfTeacher *teacher,
                           const float *z,
                           uintptr_t n,
                           uintptr_t dim,
                           uint32_t label,
                           float w,
                           float *out);

/**
 * Student previews, laid out like [`df_teacher_sample`].
 *
 * # Safety
 * `z` must hold `n * dim` floats and `out` room for as many.
 */
DfStatus df_student_preview(const DfStudent *student,
                            const float *z,
                            uintptr_t n,
                            uintptr_t dim,
                            uint32_t label,
                            float w,
                            float *out);

/**
 * Previews `n` seeded noises with the student, scores them, and refines
 * the best with one teacher call. Writes the teacher's data dimension
 * worth of floats to `out_sample` and the chosen index to `out_index`.
 *
 * # Safety
 * Handles must be live; `out_sample` must have room for the data dimension.
 */
DfStatus df_scout_and_refine(const DfStudent *student,
                             const DfTeacher *teacher,
                             const DfMixture *mixture,
                             DfScorer scorer,
                             uintptr_t n,
                             uint32_t label,
                             float w,
                             uint64_t seed,
                             float *out_sample,
                             uintptr_t *out_index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHFLOW_H */
