//! C ABI for the flowfill pipeline's embeddable pieces: the turbulence
//! solver, Gaussian-random-field sampling, mask construction, and the
//! completion metrics.
//!
//! Conventions:
//! - Handles (`FfField`, `FfTrajectory`, `FfMask`) are opaque; create them
//!   through `ff_*` constructors and release them with the matching
//!   `ff_*_free`. Passing a handle to any other `free` is undefined.
//! - Every fallible call returns an [`FfStatus`]; `FF_STATUS_OK` is 0. On
//!   failure, a thread-local message is retrievable via [`ff_last_error`].
//! - Buffers are caller-allocated; `_len` parameters give their capacity in
//!   elements. Fields and masks are row-major `grid * grid` arrays.
//! - No call keeps references to caller memory after it returns.

use flowfill::error::Error;
use flowfill::evaluation::{relative_l2_masked, spectrum_values};
use flowfill::masking::{build_mask, MaskConfig, MaskGrid, MaskLayout};
use flowfill::solver::{grf_sample, simulate, FlowField, SolverParams, Trajectory};
use std::cell::RefCell;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result of every fallible `ff_*` call. Nonzero values keep the same
/// meaning as the `flowfill` CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    /// Success.
    Ok = 0,
    /// Unexpected internal failure (a bug; includes caught panics).
    Internal = 1,
    /// A null handle or null buffer was passed.
    NullArgument = 2,
    /// Invalid configuration or argument values.
    Config = 3,
    /// Filesystem or data-format failure.
    Io = 4,
    /// The integration produced non-finite values.
    Instability = 5,
    /// A handle was used in a role it does not belong to.
    StageMismatch = 6,
    /// The requested metric is mathematically undefined for these inputs.
    UndefinedMetric = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> FfStatus {
    match err.exit_code() {
        3 => FfStatus::Config,
        4 => FfStatus::Io,
        5 => FfStatus::Instability,
        6 => FfStatus::StageMismatch,
        7 => FfStatus::UndefinedMetric,
        _ => FfStatus::Internal,
    }
}

fn fail(err: &Error) -> FfStatus {
    set_error(err.to_string());
    status_of(err)
}

fn null_arg(what: &str) -> FfStatus {
    set_error(format!("{what} must not be null"));
    FfStatus::NullArgument
}

/// Run a body, translating panics into `Internal` instead of unwinding
/// across the C boundary.
fn guard(f: impl FnOnce() -> FfStatus) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            FfStatus::Internal
        }
    }
}

/// A vorticity field on an `n x n` periodic grid. Opaque.
pub struct FfField(FlowField);

/// A sampled simulation run. Opaque.
pub struct FfTrajectory(Trajectory);

/// A binary occlusion mask. Opaque.
pub struct FfMask(MaskGrid);

/// Mirror of the solver's parameters, plain-old-data for C.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FfSolverParams {
    pub reynolds: f64,
    pub forcing_wavenumber: u32,
    pub forcing_amplitude: f64,
    pub drag_coefficient: f64,
    pub dt: f64,
    pub dealias: bool,
}

impl From<FfSolverParams> for SolverParams {
    fn from(p: FfSolverParams) -> SolverParams {
        SolverParams {
            reynolds: p.reynolds,
            forcing_wavenumber: p.forcing_wavenumber,
            forcing_amplitude: p.forcing_amplitude,
            drag_coefficient: p.drag_coefficient,
            dt: p.dt,
            dealias: p.dealias,
        }
    }
}

/// Square-mask placement schemes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfMaskLayout {
    /// One square centered in the field.
    Single = 0,
    /// A uniform lattice of squares.
    Grid = 1,
}

// ---------------------------------------------------------------------------
// Library info and errors.
// ---------------------------------------------------------------------------

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `buf_len` bytes including the NUL) and return the full
/// message length in bytes, excluding the NUL. A zero return means no error
/// has been recorded on this thread. `buf` may be null if `buf_len` is 0.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes (or be null with
/// `buf_len == 0`).
#[no_mangle]
pub unsafe extern "C" fn ff_last_error(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && buf_len > 0 {
            let n = bytes.len().min(buf_len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

// ---------------------------------------------------------------------------
// Fields.
// ---------------------------------------------------------------------------

/// Default solver parameters (the values the pipeline itself uses).
#[no_mangle]
pub extern "C" fn ff_solver_params_default() -> FfSolverParams {
    let p = SolverParams::default();
    FfSolverParams {
        reynolds: p.reynolds,
        forcing_wavenumber: p.forcing_wavenumber,
        forcing_amplitude: p.forcing_amplitude,
        drag_coefficient: p.drag_coefficient,
        dt: p.dt,
        dealias: p.dealias,
    }
}

/// Sample an initial vorticity field from the pipeline's Gaussian random
/// field prior on an `n x n` grid. Deterministic in `seed`.
///
/// # Safety
/// `out` must be a valid pointer to an `FfField*`. On success it receives a
/// new handle to be released with [`ff_field_free`].
#[no_mangle]
pub unsafe extern "C" fn ff_grf_sample(
    n: usize,
    seed: u64,
    out: *mut *mut FfField,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        match grf_sample(seed, n) {
            Ok(f) => {
                *out = Box::into_raw(Box::new(FfField(f)));
                FfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Wrap caller-provided row-major values (length `n * n`) as a field. The
/// values are copied; the input buffer is not retained.
///
/// # Safety
/// `values` must point to `n * n` readable doubles; `out` must be a valid
/// pointer to an `FfField*`.
#[no_mangle]
pub unsafe extern "C" fn ff_field_from_values(
    n: usize,
    values: *const f64,
    out: *mut *mut FfField,
) -> FfStatus {
    guard(|| {
        if values.is_null() {
            return null_arg("values");
        }
        if out.is_null() {
            return null_arg("out");
        }
        if n == 0 {
            set_error("grid size must be positive");
            return FfStatus::Config;
        }
        let data = std::slice::from_raw_parts(values, n * n).to_vec();
        let field = FlowField {
            n,
            values: data,
            time: 0.0,
        };
        *out = Box::into_raw(Box::new(FfField(field)));
        FfStatus::Ok
    })
}

/// Grid side length of a field, or 0 if the handle is null.
///
/// # Safety
/// `field` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_field_grid(field: *const FfField) -> usize {
    if field.is_null() {
        return 0;
    }
    (*field).0.n
}

/// Copy a field's row-major values into `out` (capacity `out_len >= n*n`).
///
/// # Safety
/// `field` must be a live handle; `out` must point to `out_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_field_values(
    field: *const FfField,
    out: *mut f64,
    out_len: usize,
) -> FfStatus {
    guard(|| {
        if field.is_null() {
            return null_arg("field");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let f = &(*field).0;
        if out_len < f.values.len() {
            set_error(format!(
                "buffer holds {out_len} values, field needs {}",
                f.values.len()
            ));
            return FfStatus::Config;
        }
        std::ptr::copy_nonoverlapping(f.values.as_ptr(), out, f.values.len());
        FfStatus::Ok
    })
}

/// Release a field handle. Null is a no-op.
///
/// # Safety
/// `field` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_field_free(field: *mut FfField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

// ---------------------------------------------------------------------------
// Simulation.
// ---------------------------------------------------------------------------

/// Integrate the forced 2D vorticity equation from `initial`, storing a
/// frame every `sample_interval` seconds for `duration` seconds (the initial
/// state is frame 0). `seed` only labels the trajectory.
///
/// # Safety
/// `initial` must be a live field handle; `out` must be a valid pointer to
/// an `FfTrajectory*`. On success it receives a new handle to be released
/// with [`ff_trajectory_free`].
#[no_mangle]
pub unsafe extern "C" fn ff_simulate(
    initial: *const FfField,
    params: FfSolverParams,
    duration: f64,
    sample_interval: f64,
    seed: u64,
    out: *mut *mut FfTrajectory,
) -> FfStatus {
    guard(|| {
        if initial.is_null() {
            return null_arg("initial");
        }
        if out.is_null() {
            return null_arg("out");
        }
        match simulate(
            &(*initial).0,
            duration,
            sample_interval,
            &params.into(),
            seed,
        ) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(FfTrajectory(t)));
                FfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of stored frames, or 0 if the handle is null.
///
/// # Safety
/// `traj` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_trajectory_num_frames(traj: *const FfTrajectory) -> usize {
    if traj.is_null() {
        return 0;
    }
    (*traj).0.frames.len()
}

/// Copy frame `index` into `out` (row-major, capacity `out_len >= n*n`).
///
/// # Safety
/// `traj` must be a live handle; `out` must point to `out_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_trajectory_frame(
    traj: *const FfTrajectory,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> FfStatus {
    guard(|| {
        if traj.is_null() {
            return null_arg("traj");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let frames = &(*traj).0.frames;
        let Some(f) = frames.get(index) else {
            set_error(format!(
                "frame index {index} out of range ({} frames)",
                frames.len()
            ));
            return FfStatus::Config;
        };
        if out_len < f.values.len() {
            set_error(format!(
                "buffer holds {out_len} values, frame needs {}",
                f.values.len()
            ));
            return FfStatus::Config;
        }
        std::ptr::copy_nonoverlapping(f.values.as_ptr(), out, f.values.len());
        FfStatus::Ok
    })
}

/// Simulation time of frame `index`, in seconds.
///
/// # Safety
/// `traj` must be a live handle; `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn ff_trajectory_time(
    traj: *const FfTrajectory,
    index: usize,
    out: *mut f64,
) -> FfStatus {
    guard(|| {
        if traj.is_null() {
            return null_arg("traj");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let frames = &(*traj).0.frames;
        let Some(f) = frames.get(index) else {
            set_error(format!(
                "frame index {index} out of range ({} frames)",
                frames.len()
            ));
            return FfStatus::Config;
        };
        *out = f.time;
        FfStatus::Ok
    })
}

/// Release a trajectory handle. Null is a no-op.
///
/// # Safety
/// `traj` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_trajectory_free(traj: *mut FfTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

// ---------------------------------------------------------------------------
// Masks and metrics.
// ---------------------------------------------------------------------------

/// Build an occlusion mask on a `grid x grid` field: one centered square
/// (`FF_MASK_LAYOUT_SINGLE`, `rows`/`cols` ignored) or a `rows x cols`
/// lattice of squares with side `mask_side`.
///
/// # Safety
/// `out` must be a valid pointer to an `FfMask*`. On success it receives a
/// new handle to be released with [`ff_mask_free`].
#[no_mangle]
pub unsafe extern "C" fn ff_mask_build(
    layout: FfMaskLayout,
    mask_side: usize,
    rows: usize,
    cols: usize,
    grid: usize,
    out: *mut *mut FfMask,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let cfg = match layout {
            FfMaskLayout::Single => MaskConfig::single(mask_side),
            FfMaskLayout::Grid => MaskConfig {
                layout: MaskLayout::Grid,
                mask_side,
                grid_rows: rows,
                grid_cols: cols,
            },
        };
        match build_mask(&cfg, grid, grid) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(FfMask(m)));
                FfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of masked (missing) cells, or 0 if the handle is null.
///
/// # Safety
/// `mask` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_mask_masked_cells(mask: *const FfMask) -> usize {
    if mask.is_null() {
        return 0;
    }
    (*mask).0.masked_cells()
}

/// Copy the mask as row-major 0/1 bytes (1 = missing) into `out`
/// (capacity `out_len >= grid*grid`).
///
/// # Safety
/// `mask` must be a live handle; `out` must point to `out_len` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn ff_mask_values(
    mask: *const FfMask,
    out: *mut u8,
    out_len: usize,
) -> FfStatus {
    guard(|| {
        if mask.is_null() {
            return null_arg("mask");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let m = &(*mask).0;
        if out_len < m.m.len() {
            set_error(format!(
                "buffer holds {out_len} values, mask needs {}",
                m.m.len()
            ));
            return FfStatus::Config;
        }
        std::ptr::copy_nonoverlapping(m.m.as_ptr(), out, m.m.len());
        FfStatus::Ok
    })
}

/// Release a mask handle. Null is a no-op.
///
/// # Safety
/// `mask` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_mask_free(mask: *mut FfMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Relative L2 distance over the masked region:
/// `sqrt( sum_{M=1} (pred - truth)^2 / sum_{M=1} truth^2 )`.
/// `len` must equal the mask's cell count; returns
/// `FF_STATUS_UNDEFINED_METRIC` when the mask is empty or the reference is
/// zero over it.
///
/// # Safety
/// `pred` and `truth` must each point to `len` readable doubles; `mask`
/// must be a live handle; `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn ff_relative_l2_masked(
    pred: *const f64,
    truth: *const f64,
    len: usize,
    mask: *const FfMask,
    out: *mut f64,
) -> FfStatus {
    guard(|| {
        if pred.is_null() {
            return null_arg("pred");
        }
        if truth.is_null() {
            return null_arg("truth");
        }
        if mask.is_null() {
            return null_arg("mask");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let m = &(*mask).0;
        if len != m.h * m.w {
            set_error(format!(
                "fields have {len} values, mask is {}x{}",
                m.h, m.w
            ));
            return FfStatus::Config;
        }
        let p = std::slice::from_raw_parts(pred, len);
        let t = std::slice::from_raw_parts(truth, len);
        match relative_l2_masked(p, t, m) {
            Ok(v) => {
                *out = v;
                FfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Kinetic-energy spectrum of a vorticity field over integer shells
/// `k = 1..=bins`, written to `out` (capacity `out_len >= bins`).
///
/// # Safety
/// `field` must be a live handle; `out` must point to `out_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_energy_spectrum(
    field: *const FfField,
    bins: usize,
    out: *mut f64,
    out_len: usize,
) -> FfStatus {
    guard(|| {
        if field.is_null() {
            return null_arg("field");
        }
        if out.is_null() {
            return null_arg("out");
        }
        if out_len < bins {
            set_error(format!("buffer holds {out_len} values, need {bins}"));
            return FfStatus::Config;
        }
        let e = spectrum_values(&(*field).0, bins);
        std::ptr::copy_nonoverlapping(e.as_ptr(), out, bins);
        FfStatus::Ok
    })
}
