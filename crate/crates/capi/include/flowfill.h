#ifndef FLOWFILL_H
#define FLOWFILL_H

/* Generated by cbindgen from flowfill-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible `ff_*` call. Nonzero values keep the same
// meaning as the `flowfill` CLI exit codes.
typedef enum FfStatus {
  // Success.
  FF_STATUS_OK = 0,
  // Unexpected internal failure (a bug; includes caught panics).
  FF_STATUS_INTERNAL = 1,
  // A null handle or null buffer was passed.
  FF_STATUS_NULL_ARGUMENT = 2,
  // Invalid configuration or argument values.
  FF_STATUS_CONFIG = 3,
  // Filesystem or data-format failure.
  FF_STATUS_IO = 4,
  // The integration produced non-finite values.
  FF_STATUS_INSTABILITY = 5,
  // A handle was used in a role it does not belong to.
  FF_STATUS_STAGE_MISMATCH = 6,
  // The requested metric is mathematically undefined for these inputs.
  FF_STATUS_UNDEFINED_METRIC = 7,
} FfStatus;

// Square-mask placement schemes.
typedef enum FfMaskLayout {
  // One square centered in the field.
  FF_MASK_LAYOUT_SINGLE = 0,
  // A uniform lattice of squares.
  FF_MASK_LAYOUT_GRID = 1,
} FfMaskLayout;

// A vorticity field on an `n x n` periodic grid. Opaque.
typedef struct FfField FfField;

// A binary occlusion mask. Opaque.
typedef struct FfMask FfMask;

// A sampled simulation run. Opaque.
typedef struct FfTrajectory FfTrajectory;

// Mirror of the solver's parameters, plain-old-data for C.
typedef struct FfSolverParams {
  double reynolds;
  uint32_t forcing_wavenumber;
  double forcing_amplitude;
  double drag_coefficient;
  double dt;
  bool dealias;
} FfSolverParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ff_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `buf_len` bytes including the NUL) and return the full
// message length in bytes, excluding the NUL. A zero return means no error
// has been recorded on this thread. `buf` may be null if `buf_len` is 0.
//
// # Safety
// `buf` must point to `buf_len` writable bytes (or be null with
// `buf_len == 0`).
size_t ff_last_error(char *buf, size_t buf_len);

// Default solver parameters (the values the pipeline itself uses).
struct FfSolverParams ff_solver_params_default(void);

// Sample an initial vorticity field from the pipeline's Gaussian random
// field prior on an `n x n` grid. Deterministic in `seed`.
//
// # Safety
// `out` must be a valid pointer to an `FfField*`. On success it receives a
// new handle to be released with [`ff_field_free`].
enum FfStatus ff_grf_sample(size_t n, uint64_t seed, struct FfField **out);

// Wrap caller-provided row-major values (length `n * n`) as a field. The
// values are copied; the input buffer is not retained.
//
// # Safety
// `values` must point to `n * n` readable doubles; `out` must be a valid
// pointer to an `FfField*`.
enum FfStatus ff_field_from_values(size_t n, const double *values, struct FfField **out);

// Grid side length of a field, or 0 if the handle is null.
//
// # Safety
// `field` must be null or a live handle from this library.
size_t ff_field_grid(const struct FfField *field);

// Copy a field's row-major values into `out` (capacity `out_len >= n*n`).
//
// # Safety
// `field` must be a live handle; `out` must point to `out_len` writable
// doubles.
enum FfStatus ff_field_values(const struct FfField *field, double *out, size_t out_len);

// Release a field handle. Null is a no-op.
//
// # Safety
// `field` must be null or a live handle from this library, not yet freed.
void ff_field_free(struct FfField *field);

// Integrate the forced 2D vorticity equation from `initial`, storing a
// frame every `sample_interval` seconds for `duration` seconds (the initial
// state is frame 0). `seed` only labels the trajectory.
//
// # Safety
// `initial` must be a live field handle; `out` must be a valid pointer to
// an `FfTrajectory*`. On success it receives a new handle to be released
// with [`ff_trajectory_free`].
enum FfStatus ff_simulate(const struct FfField *initial,
                          struct FfSolverParams params,
                          double duration,
                          double sample_interval,
                          uint64_t seed,
                          struct FfTrajectory **out);

// Number of stored frames, or 0 if the handle is null.
//
// # Safety
// `traj` must be null or a live handle from this library.
size_t ff_trajectory_num_frames(const struct FfTrajectory *traj);

// Copy frame `index` into `out` (row-major, capacity `out_len >= n*n`).
//
// # Safety
// `traj` must be a live handle; `out` must point to `out_len` writable
// doubles.
enum FfStatus ff_trajectory_frame(const struct FfTrajectory *traj,
                                  size_t index,
                                  double *out,
                                  size_t out_len);

// Simulation time of frame `index`, in seconds.
//
// # Safety
// `traj` must be a live handle; `out` must point to one writable double.
enum FfStatus ff_trajectory_time(const struct FfTrajectory *traj, size_t index, double *out);

// Release a trajectory handle. Null is a no-op.
//
// # Safety
// `traj` must be null or a live handle from this library, not yet freed.
void ff_trajectory_free(struct FfTrajectory *traj);

// Build an occlusion mask on a `grid x grid` field: one centered square
// (`FF_MASK_LAYOUT_SINGLE`, `rows`/`cols` ignored) or a `rows x cols`
// lattice of squares with side `mask_side`.
//
// # Safety
// `out` must be a valid pointer to an `FfMask*`. On success it receives a
// new handle to be released with [`ff_mask_free`].
enum FfStatus ff_mask_build(enum FfMaskLayout layout,
                            size_t mask_side,
                            size_t rows,
                            size_t cols,
                            size_t grid,
                            struct FfMask **out);

// Number of masked (missing) cells, or 0 if the handle is null.
//
// # Safety
// `mask` must be null or a live handle from this library.
size_t ff_mask_masked_cells(const struct FfMask *mask);

// Copy the mask as row-major 0/1 bytes (1 = missing) into `out`
// (capacity `out_len >= grid*grid`).
//
// # Safety
// `mask` must be a live handle; `out` must point to `out_len` writable
// bytes.
enum FfStatus ff_mask_values(const struct FfMask *mask, uint8_t *out, size_t out_len);

// Release a mask handle. Null is a no-op.
//
// # Safety
// `mask` must be null or a live handle from this library, not yet freed.
void ff_mask_free(struct FfMask *mask);

// Relative L2 distance over the masked region:
// `sqrt( sum_{M=1} (pred - truth)^2 / sum_{M=1} truth^2 )`.
// `len` must equal the mask's cell count; returns
// `FF_STATUS_UNDEFINED_METRIC` when the mask is empty or the reference is
// zero over it.
//
// # Safety
// `pred` and `truth` must each point to `len` readable doubles; `mask`
// must be a live handle; `out` must point to one writable double.
enum FfStatus ff_relative_l2_masked(const double *pred,
                                    const double *truth,
                                    size_t len,
                                    const struct FfMask *mask,
                                    double *out);

// Kinetic-energy spectrum of a vorticity field over integer shells
// `k = 1..=bins`, written to `out` (capacity `out_len >= bins`).
//
// # Safety
// `field` must be a live handle; `out` must point to `out_len` writable
// doubles.
enum FfStatus ff_energy_spectrum(const struct FfField *field,
                                 size_t bins,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWFILL_H */
