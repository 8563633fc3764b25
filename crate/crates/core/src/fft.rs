//! 2D complex FFT on square power-of-two grids, plus wavenumber tables.
//!
//! Transform convention, held fixed across the whole crate:
//!
//! - Grids are row-major: `values[i * n + j]`, where the row index `i`
//!   corresponds to coordinate `x2 = 2*pi*i/n` and the column index `j`
//!   to `x1 = 2*pi*j/n`.
//! - The forward transform is unscaled:  `F[k] = sum_x f(x) e^{-i k.x}`.
//! - The inverse transform carries the full `1/n^2` factor, so
//!   `inverse(forward(f)) == f`.
//! - Integer wavenumbers wrap as `k = j` for `j <= n/2` and `k = j - n`
//!   otherwise, independently along rows and columns. The row wavenumber is
//!   conjugate to `x2`, the column wavenumber to `x1`.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Planned 2D FFT for an `n x n` grid. Reuses scratch buffers across calls,
/// so transforms after the first are allocation-free.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex<f64>>,
    transpose_buf: Vec<Complex<f64>>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "grid size must be a power of two");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft(n, FftDirection::Forward);
        let inv = planner.plan_fft(n, FftDirection::Inverse);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Fft2 {
            n,
            fwd,
            inv,
            scratch: vec![Complex::new(0.0, 0.0); scratch_len],
            transpose_buf: vec![Complex::new(0.0, 0.0); n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// In-place unscaled forward transform of a row-major `n x n` buffer.
    pub fn forward(&mut self, data: &mut [Complex<f64>]) {
        self.transform(data, true);
    }

    /// In-place inverse transform, scaled by `1/n^2`.
    pub fn inverse(&mut self, data: &mut [Complex<f64>]) {
        self.transform(data, false);
        let scale = 1.0 / (self.n * self.n) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&mut self, data: &mut [Complex<f64>], forward: bool) {
        let n = self.n;
        assert_eq!(data.len(), n * n, "buffer must be n*n");
        let fft = if forward { &self.fwd } else { &self.inv };
        // Rows, then columns (via transpose so columns are contiguous).
        fft.process_with_scratch(data, &mut self.scratch);
        transpose_square(data, &mut self.transpose_buf, n);
        fft.process_with_scratch(&mut self.transpose_buf, &mut self.scratch);
        transpose_square(&self.transpose_buf, data, n);
    }
}

fn transpose_square(src: &[Complex<f64>], dst: &mut [Complex<f64>], n: usize) {
    for i in 0..n {
        for j in 0..n {
            dst[j * n + i] = src[i * n + j];
        }
    }
}

/// Integer wavenumber for each FFT index: `0, 1, ..., n/2, -(n/2-1), ..., -1`.
pub fn wavenumbers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| if j <= n / 2 { j as f64 } else { j as f64 - n as f64 })
        .collect()
}

/// Lift a real row-major grid into a complex buffer.
pub fn to_complex(values: &[f64]) -> Vec<Complex<f64>> {
    values.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

/// Real parts of a complex buffer (imaginary parts are discarded; callers
/// use this only where the result is real up to round-off).
pub fn to_real(values: &[Complex<f64>]) -> Vec<f64> {
    values.iter().map(|v| v.re).collect()
}
