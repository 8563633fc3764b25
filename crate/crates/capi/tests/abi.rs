//! Exercises the C ABI from Rust (the extern fns are plain symbols here)
//! and, at the end, from an actual C translation unit compiled against the
//! generated header and the static library.

use flowfill_capi::*;
use std::f64::consts::TAU;
use std::path::PathBuf;
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let len = unsafe { ff_last_error(buf.as_mut_ptr() as *mut _, buf.len()) };
    let n = len.min(buf.len() - 1);
    String::from_utf8_lossy(&buf[..n]).into_owned()
}

fn grf(n: usize, seed: u64) -> *mut FfField {
    let mut f: *mut FfField = ptr::null_mut();
    let st = unsafe { ff_grf_sample(n, seed, &mut f) };
    assert_eq!(st, FfStatus::Ok, "{}", last_error());
    assert!(!f.is_null());
    f
}

fn values_of(f: *const FfField) -> Vec<f64> {
    let n = unsafe { ff_field_grid(f) };
    let mut out = vec![0.0; n * n];
    let st = unsafe { ff_field_values(f, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, FfStatus::Ok, "{}", last_error());
    out
}

#[test]
fn grf_sampling_is_deterministic_in_the_seed() {
    let a = grf(32, 7);
    let b = grf(32, 7);
    let c = grf(32, 8);
    assert_eq!(unsafe { ff_field_grid(a) }, 32);
    assert_eq!(values_of(a), values_of(b));
    assert_ne!(values_of(a), values_of(c));
    unsafe {
        ff_field_free(a);
        ff_field_free(b);
        ff_field_free(c);
    }
}

#[test]
fn simulation_produces_finite_sampled_frames() {
    let f = grf(32, 3);
    let mut p = ff_solver_params_default();
    p.dt = 1.0 / 128.0;
    let mut traj: *mut FfTrajectory = ptr::null_mut();
    let st = unsafe { ff_simulate(f, p, 0.125, 1.0 / 32.0, 3, &mut traj) };
    assert_eq!(st, FfStatus::Ok, "{}", last_error());
    let frames = unsafe { ff_trajectory_num_frames(traj) };
    assert_eq!(frames, 5); // initial state plus 4 samples

    let mut buf = vec![0.0; 32 * 32];
    let mut t = 0.0;
    for i in 0..frames {
        assert_eq!(
            unsafe { ff_trajectory_frame(traj, i, buf.as_mut_ptr(), buf.len()) },
            FfStatus::Ok
        );
        assert!(buf.iter().all(|v| v.is_finite()));
        assert_eq!(unsafe { ff_trajectory_time(traj, i, &mut t) }, FfStatus::Ok);
        assert!((t - i as f64 / 32.0).abs() < 1e-12);
    }
    // Out-of-range frame is a config error, not a crash.
    assert_eq!(
        unsafe { ff_trajectory_frame(traj, frames, buf.as_mut_ptr(), buf.len()) },
        FfStatus::Config
    );
    unsafe {
        ff_trajectory_free(traj);
        ff_field_free(f);
    }
}

#[test]
fn field_round_trips_through_value_buffers() {
    let n = 8;
    let vals: Vec<f64> = (0..n * n).map(|i| i as f64 * 0.25 - 3.0).collect();
    let mut f: *mut FfField = ptr::null_mut();
    assert_eq!(
        unsafe { ff_field_from_values(n, vals.as_ptr(), &mut f) },
        FfStatus::Ok
    );
    assert_eq!(values_of(f), vals);
    // Undersized output buffer is rejected.
    let mut small = vec![0.0; 3];
    assert_eq!(
        unsafe { ff_field_values(f, small.as_mut_ptr(), small.len()) },
        FfStatus::Config
    );
    unsafe { ff_field_free(f) };
}

#[test]
fn masks_expose_area_and_cell_values() {
    let mut m: *mut FfMask = ptr::null_mut();
    assert_eq!(
        unsafe { ff_mask_build(FfMaskLayout::Grid, 4, 4, 4, 32, &mut m) },
        FfStatus::Ok
    );
    // 16 squares of 4x4 on a 32^2 grid: a quarter of the cells.
    assert_eq!(unsafe { ff_mask_masked_cells(m) }, 256);
    let mut cells = vec![0u8; 32 * 32];
    assert_eq!(
        unsafe { ff_mask_values(m, cells.as_mut_ptr(), cells.len()) },
        FfStatus::Ok
    );
    assert_eq!(cells.iter().map(|&v| v as usize).sum::<usize>(), 256);
    assert!(cells.iter().all(|&v| v <= 1));
    unsafe { ff_mask_free(m) };

    // Impossible placement: squares larger than the grid allows.
    let mut bad: *mut FfMask = ptr::null_mut();
    assert_eq!(
        unsafe { ff_mask_build(FfMaskLayout::Grid, 20, 4, 4, 32, &mut bad) },
        FfStatus::Config
    );
    assert!(bad.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn masked_relative_l2_matches_known_cases() {
    let n = 32;
    let truth: Vec<f64> = (0..n * n).map(|i| ((i % 17) as f64) - 8.0).collect();
    let mut m: *mut FfMask = ptr::null_mut();
    assert_eq!(
        unsafe { ff_mask_build(FfMaskLayout::Single, 16, 1, 1, n, &mut m) },
        FfStatus::Ok
    );
    // Zero prediction scores exactly 1.
    let zeros = vec![0.0; n * n];
    let mut rel = -1.0;
    assert_eq!(
        unsafe { ff_relative_l2_masked(zeros.as_ptr(), truth.as_ptr(), n * n, m, &mut rel) },
        FfStatus::Ok
    );
    assert_eq!(rel, 1.0);
    // Perfect prediction scores exactly 0.
    assert_eq!(
        unsafe { ff_relative_l2_masked(truth.as_ptr(), truth.as_ptr(), n * n, m, &mut rel) },
        FfStatus::Ok
    );
    assert_eq!(rel, 0.0);
    // All-zero reference makes the metric undefined, with the code to match.
    assert_eq!(
        unsafe { ff_relative_l2_masked(truth.as_ptr(), zeros.as_ptr(), n * n, m, &mut rel) },
        FfStatus::UndefinedMetric
    );
    // Length/mask mismatch is a config error.
    assert_eq!(
        unsafe { ff_relative_l2_masked(truth.as_ptr(), truth.as_ptr(), 7, m, &mut rel) },
        FfStatus::Config
    );
    unsafe { ff_mask_free(m) };
}

#[test]
fn energy_spectrum_places_a_pure_mode() {
    // w = sin(3 x1) carries kinetic energy 1/36, all in shell k = 3.
    let n = 64;
    let vals: Vec<f64> = (0..n * n)
        .map(|i| (3.0 * TAU * (i % n) as f64 / n as f64).sin())
        .collect();
    let mut f: *mut FfField = ptr::null_mut();
    assert_eq!(
        unsafe { ff_field_from_values(n, vals.as_ptr(), &mut f) },
        FfStatus::Ok
    );
    let bins = 10;
    let mut e = vec![0.0; bins];
    assert_eq!(
        unsafe { ff_energy_spectrum(f, bins, e.as_mut_ptr(), e.len()) },
        FfStatus::Ok
    );
    assert!((e[2] - 1.0 / 36.0).abs() < 1e-12, "E(3) = {}", e[2]);
    for (i, v) in e.iter().enumerate() {
        if i != 2 {
            assert!(v.abs() < 1e-12, "E({}) = {v}", i + 1);
        }
    }
    unsafe { ff_field_free(f) };
}

#[test]
fn null_arguments_set_status_and_message() {
    let mut f: *mut FfField = ptr::null_mut();
    assert_eq!(
        unsafe { ff_field_from_values(4, ptr::null(), &mut f) },
        FfStatus::NullArgument
    );
    assert_eq!(last_error(), "values must not be null");
    assert_eq!(unsafe { ff_grf_sample(8, 0, ptr::null_mut()) }, FfStatus::NullArgument);
    assert_eq!(unsafe { ff_field_grid(ptr::null()) }, 0);
    assert_eq!(unsafe { ff_trajectory_num_frames(ptr::null()) }, 0);
    assert_eq!(unsafe { ff_mask_masked_cells(ptr::null()) }, 0);
    // Free functions tolerate null.
    unsafe {
        ff_field_free(ptr::null_mut());
        ff_trajectory_free(ptr::null_mut());
        ff_mask_free(ptr::null_mut());
    }

    // Truncating retrieval still NUL-terminates and reports the full length.
    unsafe { ff_field_values(ptr::null(), ptr::null_mut(), 0) };
    let full = last_error();
    let mut tiny = [0u8; 6];
    let len = unsafe { ff_last_error(tiny.as_mut_ptr() as *mut _, tiny.len()) };
    assert_eq!(len, full.len());
    assert_eq!(&tiny[..5], &full.as_bytes()[..5]);
    assert_eq!(tiny[5], 0);
}

#[test]
fn header_compiles_and_runs_from_c() {
    let include_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include_dir.join("flowfill.h");
    assert!(header.is_file(), "cbindgen header missing");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ff_grf_sample",
        "ff_simulate",
        "ff_mask_build",
        "ff_relative_l2_masked",
        "ff_energy_spectrum",
        "FF_STATUS_UNDEFINED_METRIC",
        "typedef struct FfField FfField",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }

    // The staticlib lands next to the test binary's deps directory.
    let lib = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("libflowfill_capi.a");
    assert!(lib.is_file(), "staticlib missing at {}", lib.display());

    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("c_abi");
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("demo.c");
    std::fs::write(
        &src,
        r#"
#include "flowfill.h"
#include <math.h>
#include <stdlib.h>

int main(void) {
    FfField *field = NULL;
    if (ff_grf_sample(32, 7, &field) != FF_STATUS_OK) return 1;
    size_t n = ff_field_grid(field);
    if (n != 32) return 2;

    FfSolverParams p = ff_solver_params_default();
    p.dt = 1.0 / 128.0;
    FfTrajectory *traj = NULL;
    if (ff_simulate(field, p, 0.125, 1.0 / 32.0, 7, &traj) != FF_STATUS_OK) return 3;
    if (ff_trajectory_num_frames(traj) != 5) return 4;

    double *truth = malloc(n * n * sizeof(double));
    if (ff_trajectory_frame(traj, 4, truth, n * n) != FF_STATUS_OK) return 5;

    FfMask *mask = NULL;
    if (ff_mask_build(FF_MASK_LAYOUT_SINGLE, 16, 1, 1, n, &mask) != FF_STATUS_OK) return 6;
    if (ff_mask_masked_cells(mask) != 256) return 7;

    double *pred = calloc(n * n, sizeof(double));
    double rel = 0.0;
    if (ff_relative_l2_masked(pred, truth, n * n, mask, &rel) != FF_STATUS_OK) return 8;
    if (fabs(rel - 1.0) > 1e-12) return 9;

    if (ff_relative_l2_masked(NULL, truth, n * n, mask, &rel) != FF_STATUS_NULL_ARGUMENT) return 10;
    char msg[8];
    if (ff_last_error(msg, sizeof msg) == 0) return 11;

    free(pred); free(truth);
    ff_mask_free(mask); ff_trajectory_free(traj); ff_field_free(field);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.join("demo");
    let cc = std::process::Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", include_dir.display()))
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&exe)
        .output()
        .expect("cc is available");
    assert!(
        cc.status.success(),
        "cc failed: {}",
        String::from_utf8_lossy(&cc.stderr)
    );
    let run = std::process::Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "C demo exit");
}
