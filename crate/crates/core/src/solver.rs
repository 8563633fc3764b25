//! Pseudo-spectral solver for the forced 2D vorticity equation on the
//! periodic square `(0, 2*pi)^2`:
//!
//! ```text
//!   dw/dt + u . grad(w) = (1/Re) lap(w) + A cos(kf * x2) + c_d * w
//! ```
//!
//! with defaults `Re = 1000`, `A = -4`, `kf = 4`, `c_d = -0.1` (the last two
//! terms together are the usual Kolmogorov forcing `-4 cos(4 x2) - 0.1 w`).
//! Velocity is recovered from vorticity through the streamfunction:
//! `lap(psi) = -w`, `u = (d psi / d x2, -d psi / d x1)`.
//!
//! Discretization: Fourier collocation in space with 2/3-rule dealiasing of
//! the advection product; Crank-Nicolson for the viscous term and explicit
//! second-order Heun (predictor/corrector trapezoid) for advection, forcing,
//! and drag. The drag term is deliberately explicit: it is non-stiff.
//!
//! Grid and transform conventions are those of [`crate::fft`]: row index is
//! `x2`, column index is `x1`, forward FFT unscaled, inverse scaled by
//! `1/n^2`, wavenumbers wrap past `n/2`.

use crate::error::{Error, Result};
use crate::fft::{self, Fft2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

pub const TAU: f64 = std::f64::consts::TAU;

/// A vorticity snapshot on an `n x n` periodic grid over `(0, 2*pi)^2`.
///
/// `values[i * n + j]` holds `w(x1 = 2*pi*j/n, x2 = 2*pi*i/n)` at time
/// `time` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub n: usize,
    pub values: Vec<f64>,
    pub time: f64,
}

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        FlowField {
            n,
            values: vec![0.0; n * n],
            time: 0.0,
        }
    }

    /// Build a field by evaluating `f(x1, x2)` at every grid node.
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let x1 = TAU * j as f64 / n as f64;
                let x2 = TAU * i as f64 / n as f64;
                values.push(f(x1, x2));
            }
        }
        FlowField {
            n,
            values,
            time: 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Largest absolute value, ignoring NaNs (infinities dominate).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Check structural invariants: square power-of-two grid, finite values,
    /// zero spatial mean.
    pub fn validate(&self) -> Result<()> {
        if !self.n.is_power_of_two() || self.n < 4 {
            return Err(Error::Config(format!(
                "grid size {} must be a power of two >= 4",
                self.n
            )));
        }
        if self.values.len() != self.n * self.n {
            return Err(Error::Config(format!(
                "field buffer has {} values, expected {}",
                self.values.len(),
                self.n * self.n
            )));
        }
        if !self.is_finite() {
            return Err(Error::Config("field contains non-finite values".into()));
        }
        if self.mean().abs() > 1e-10 {
            return Err(Error::Config(format!(
                "field mean {:.3e} exceeds 1e-10",
                self.mean()
            )));
        }
        Ok(())
    }
}

/// Physical and numerical parameters of the integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    /// Reynolds number (dimensionless).
    pub reynolds: f64,
    /// Forcing wavenumber along `x2`.
    pub forcing_wavenumber: u32,
    /// Amplitude of the `cos(kf * x2)` forcing term.
    pub forcing_amplitude: f64,
    /// Coefficient of the linear drag term `c_d * w`.
    pub drag_coefficient: f64,
    /// Fixed time step (seconds).
    pub dt: f64,
    /// Apply the 2/3 rule to the advection product.
    pub dealias: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            reynolds: 1000.0,
            forcing_wavenumber: 4,
            forcing_amplitude: -4.0,
            drag_coefficient: -0.1,
            // 1/1024 s: divides the 1/32 s sampling interval exactly and
            // keeps the advective CFL comfortable on a 256^2 grid.
            dt: 1.0 / 1024.0,
            dealias: true,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.reynolds > 0.0) {
            return Err(Error::Config(format!(
                "reynolds must be positive, got {}",
                self.reynolds
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// A sequence of fields sampled at a fixed interval from one simulation run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub frames: Vec<FlowField>,
    pub sample_interval: f64,
    pub params: SolverParams,
    pub seed: u64,
}

/// Sample an initial vorticity field from the Gaussian random field
/// `N(0, 7^{3/2} (-lap + 49 I)^{-5/2})`.
///
/// Sampling is done by filtering white noise in Fourier space: a real white
/// noise grid is transformed (its coefficients are automatically
/// conjugate-symmetric), each mode is scaled by
/// `n * sqrt(c) * (|k|^2 + 49)^{-5/4}` with `c = 7^{3/2} / (4*pi^2)`, the
/// `k = 0` mode is zeroed, and the result is transformed back. Under the
/// crate FFT convention this gives modal variances matching the continuum
/// operator restricted to the grid. Fully determined by `seed`.
pub fn grf_sample(seed: u64, grid_size: usize) -> Result<FlowField> {
    if !grid_size.is_power_of_two() || grid_size < 16 {
        return Err(Error::Config(format!(
            "grf grid size must be a power of two >= 16, got {grid_size}"
        )));
    }
    let n = grid_size;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| Complex::new(standard_normal(&mut rng), 0.0))
        .collect();
    let mut fft = Fft2::new(n);
    fft.forward(&mut buf);

    let k = fft::wavenumbers(n);
    let amp = n as f64 * (7.0_f64.powf(1.5) / (4.0 * std::f64::consts::PI.powi(2))).sqrt();
    for i in 0..n {
        for j in 0..n {
            let ksq = k[i] * k[i] + k[j] * k[j];
            buf[i * n + j] *= amp * (ksq + 49.0).powf(-1.25);
        }
    }
    buf[0] = Complex::new(0.0, 0.0);

    fft.inverse(&mut buf);
    Ok(FlowField {
        n,
        values: fft::to_real(&buf),
        time: 0.0,
    })
}

/// One standard normal draw via Box-Muller (two uniforms per draw; the sine
/// partner is discarded to keep the stream layout simple and reproducible).
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1], safe to log
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Recover velocity `(u1, u2)` from vorticity via the streamfunction.
pub fn vorticity_to_velocity(field: &FlowField) -> (Vec<f64>, Vec<f64>) {
    let n = field.n;
    let mut w = fft::to_complex(&field.values);
    let mut fft2 = Fft2::new(n);
    fft2.forward(&mut w);

    let k = fft::wavenumbers(n);
    let kd = derivative_wavenumbers(n);
    let mut u1 = vec![Complex::new(0.0, 0.0); n * n];
    let mut u2 = vec![Complex::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let ksq = k[i] * k[i] + k[j] * k[j];
            if ksq == 0.0 {
                continue;
            }
            let psi = w[i * n + j] / ksq; // lap(psi) = -w  =>  psi_hat = w_hat / |k|^2
            // u1 = d psi / d x2 (row direction), u2 = -d psi / d x1 (column).
            u1[i * n + j] = Complex::new(0.0, kd[i]) * psi;
            u2[i * n + j] = Complex::new(0.0, -kd[j]) * psi;
        }
    }
    fft2.inverse(&mut u1);
    fft2.inverse(&mut u2);
    (fft::to_real(&u1), fft::to_real(&u2))
}

/// Wavenumbers used in first-derivative multiplications. The Nyquist mode is
/// zeroed: `i * k` at `k = n/2` has no conjugate partner, so keeping it would
/// make odd-order spectral derivatives break real symmetry.
fn derivative_wavenumbers(n: usize) -> Vec<f64> {
    let mut k = fft::wavenumbers(n);
    k[n / 2] = 0.0;
    k
}

/// Advective CFL bound `0.5 * dx / max |u|` for a field (infinite for a
/// quiescent field).
pub fn cfl_max_dt(field: &FlowField) -> f64 {
    let (u1, u2) = vorticity_to_velocity(field);
    let umax = u1
        .iter()
        .zip(&u2)
        .fold(0.0_f64, |a, (&a1, &a2)| a.max((a1 * a1 + a2 * a2).sqrt()));
    let dx = TAU / field.n as f64;
    if umax > 0.0 {
        0.5 * dx / umax
    } else {
        f64::INFINITY
    }
}

/// Reusable spectral workspace for repeated stepping on one grid size.
pub struct Stepper {
    n: usize,
    params: SolverParams,
    fft: Fft2,
    /// `|k|^2` table.
    ksq: Vec<f64>,
    /// First-derivative wavenumbers (Nyquist zeroed), per index.
    kd: Vec<f64>,
    /// Crank-Nicolson numerator `1 - dt*|k|^2/(2 Re)` per mode.
    cn_num: Vec<f64>,
    /// Crank-Nicolson denominator `1 + dt*|k|^2/(2 Re)` per mode.
    cn_den: Vec<f64>,
    /// 2/3-rule keep mask (1.0 keep / 0.0 zero) for the advection product.
    dealias: Vec<f64>,
    /// Spectral coefficients of the static forcing `A cos(kf * x2)`.
    forcing: Vec<Complex<f64>>,
    // Scratch buffers.
    s_u1: Vec<Complex<f64>>,
    s_u2: Vec<Complex<f64>>,
    s_w1: Vec<Complex<f64>>,
    s_w2: Vec<Complex<f64>>,
    s_n1: Vec<Complex<f64>>,
    s_n2: Vec<Complex<f64>>,
    s_pred: Vec<Complex<f64>>,
}

impl Stepper {
    pub fn new(n: usize, params: SolverParams) -> Result<Self> {
        params.validate()?;
        if !n.is_power_of_two() || n < 4 {
            return Err(Error::Config(format!(
                "grid size {n} must be a power of two >= 4"
            )));
        }
        let k = fft::wavenumbers(n);
        let kd = derivative_wavenumbers(n);
        let mut ksq = vec![0.0; n * n];
        let mut cn_num = vec![0.0; n * n];
        let mut cn_den = vec![0.0; n * n];
        let mut dealias = vec![1.0; n * n];
        let kmax = n as f64 / 3.0;
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                let k2 = k[i] * k[i] + k[j] * k[j];
                ksq[idx] = k2;
                let visc = params.dt * k2 / (2.0 * params.reynolds);
                cn_num[idx] = 1.0 - visc;
                cn_den[idx] = 1.0 + visc;
                if params.dealias && (k[i].abs() > kmax || k[j].abs() > kmax) {
                    dealias[idx] = 0.0;
                }
            }
        }
        // A cos(kf * x2) lives at (row, col) = (kf, 0) and (n - kf, 0), each
        // with unscaled-FFT coefficient A * n^2 / 2.
        let mut forcing = vec![Complex::new(0.0, 0.0); n * n];
        let kf = params.forcing_wavenumber as usize;
        if params.forcing_amplitude != 0.0 {
            if kf == 0 || kf >= n / 2 {
                return Err(Error::Config(format!(
                    "forcing wavenumber {kf} must satisfy 0 < kf < n/2 = {}",
                    n / 2
                )));
            }
            let c = params.forcing_amplitude * (n * n) as f64 / 2.0;
            forcing[kf * n] = Complex::new(c, 0.0);
            forcing[(n - kf) * n] = Complex::new(c, 0.0);
        }
        let zeros = vec![Complex::new(0.0, 0.0); n * n];
        Ok(Stepper {
            n,
            params,
            fft: Fft2::new(n),
            ksq,
            kd,
            cn_num,
            cn_den,
            dealias,
            forcing,
            s_u1: zeros.clone(),
            s_u2: zeros.clone(),
            s_w1: zeros.clone(),
            s_w2: zeros.clone(),
            s_n1: zeros.clone(),
            s_n2: zeros.clone(),
            s_pred: zeros,
        })
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    /// Explicit right-hand side: `-dealias((u . grad w)^) + forcing + drag*w`,
    /// evaluated from spectral vorticity `w` into `out`.
    fn explicit_rhs(&mut self, w: &[Complex<f64>], out: &mut [Complex<f64>]) {
        let n = self.n;
        for i in 0..n {
            let kdi = self.kd[i];
            for j in 0..n {
                let idx = i * n + j;
                let ksq = self.ksq[idx];
                let wh = w[idx];
                let psi = if ksq == 0.0 { Complex::new(0.0, 0.0) } else { wh / ksq };
                self.s_u1[idx] = Complex::new(0.0, kdi) * psi;
                self.s_u2[idx] = Complex::new(0.0, -self.kd[j]) * psi;
                self.s_w1[idx] = Complex::new(0.0, self.kd[j]) * wh;
                self.s_w2[idx] = Complex::new(0.0, kdi) * wh;
            }
        }
        self.fft.inverse(&mut self.s_u1);
        self.fft.inverse(&mut self.s_u2);
        self.fft.inverse(&mut self.s_w1);
        self.fft.inverse(&mut self.s_w2);
        // Advection product in physical space, using real parts only.
        for idx in 0..n * n {
            let adv = self.s_u1[idx].re * self.s_w1[idx].re + self.s_u2[idx].re * self.s_w2[idx].re;
            out[idx] = Complex::new(adv, 0.0);
        }
        self.fft.forward(out);
        let drag = self.params.drag_coefficient;
        for idx in 0..n * n {
            out[idx] = -out[idx] * self.dealias[idx] + self.forcing[idx] + drag * w[idx];
        }
    }

    /// Advance spectral vorticity by one `dt` in place. `time` is the
    /// post-step time, used only for instability reporting.
    pub fn step_spectral(&mut self, w: &mut Vec<Complex<f64>>, time: f64) -> Result<()> {
        let n = self.n;
        let dt = self.params.dt;
        let mut n1 = std::mem::take(&mut self.s_n1);
        let mut n2 = std::mem::take(&mut self.s_n2);
        let mut pred = std::mem::take(&mut self.s_pred);

        self.explicit_rhs(w, &mut n1);
        for idx in 0..n * n {
            pred[idx] = (self.cn_num[idx] * w[idx] + dt * n1[idx]) / self.cn_den[idx];
        }
        pred[0] = Complex::new(0.0, 0.0);
        self.explicit_rhs(&pred, &mut n2);
        for idx in 0..n * n {
            w[idx] = (self.cn_num[idx] * w[idx] + 0.5 * dt * (n1[idx] + n2[idx]))
                / self.cn_den[idx];
        }
        w[0] = Complex::new(0.0, 0.0);

        self.s_n1 = n1;
        self.s_n2 = n2;
        self.s_pred = pred;

        if !w.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            // Report the largest finite physical magnitude (infinite if the
            // blow-up already reached infinity).
            let max_abs = w
                .iter()
                .fold(0.0_f64, |a, v| a.max(v.re.abs()).max(v.im.abs()))
                / (n * n) as f64;
            return Err(Error::Instability { time, max_abs });
        }
        Ok(())
    }

    /// One field-to-field step (transforms in, steps, transforms out).
    pub fn step_field(&mut self, field: &FlowField) -> Result<FlowField> {
        assert_eq!(field.n, self.n, "stepper grid size mismatch");
        let mut w = fft::to_complex(&field.values);
        self.fft.forward(&mut w);
        let time = field.time + self.params.dt;
        self.step_spectral(&mut w, time)?;
        self.fft.inverse(&mut w);
        let out = FlowField {
            n: field.n,
            values: fft::to_real(&w),
            time,
        };
        if !out.is_finite() {
            return Err(Error::Instability {
                time,
                max_abs: out.max_abs(),
            });
        }
        Ok(out)
    }
}

/// Advance a field by one time step (convenience wrapper; for long
/// integrations prefer [`Stepper`] or [`simulate`], which reuse FFT plans).
pub fn step(field: &FlowField, params: &SolverParams) -> Result<FlowField> {
    Stepper::new(field.n, *params)?.step_field(field)
}

/// Integrate `initial` for `duration` seconds, sampling every
/// `sample_interval` seconds (both endpoints included).
///
/// `sample_interval` must be an integer multiple of `params.dt`, and
/// `duration` an integer multiple of `sample_interval`. The advective CFL
/// bound is validated once against the initial field.
pub fn simulate(
    initial: &FlowField,
    duration: f64,
    sample_interval: f64,
    params: &SolverParams,
    seed: u64,
) -> Result<Trajectory> {
    params.validate()?;
    initial.validate()?;
    let steps_per_sample = integer_ratio(sample_interval, params.dt).ok_or_else(|| {
        Error::Config(format!(
            "sample_interval {sample_interval} is not an integer multiple of dt {}",
            params.dt
        ))
    })?;
    let num_samples = if duration == 0.0 {
        0
    } else {
        integer_ratio(duration, sample_interval).ok_or_else(|| {
            Error::Config(format!(
                "duration {duration} is not an integer multiple of sample_interval {sample_interval}"
            ))
        })?
    };
    let bound = cfl_max_dt(initial);
    if params.dt > bound {
        return Err(Error::Config(format!(
            "dt {} violates the advective CFL bound {:.6e} (0.5 * dx / max |u|) for the initial field",
            params.dt, bound
        )));
    }

    let mut stepper = Stepper::new(initial.n, *params)?;
    let mut w = fft::to_complex(&initial.values);
    stepper.fft.forward(&mut w);

    let mut frames = Vec::with_capacity(num_samples as usize + 1);
    frames.push(FlowField {
        n: initial.n,
        values: initial.values.clone(),
        time: 0.0,
    });
    for s in 1..=num_samples {
        for sub in 1..=steps_per_sample {
            let t = ((s - 1) * steps_per_sample + sub) as f64 * params.dt;
            stepper.step_spectral(&mut w, t)?;
        }
        let mut phys = w.clone();
        stepper.fft.inverse(&mut phys);
        frames.push(FlowField {
            n: initial.n,
            values: fft::to_real(&phys),
            time: s as f64 * sample_interval,
        });
    }
    Ok(Trajectory {
        frames,
        sample_interval,
        params: *params,
        seed,
    })
}

/// `Some(a/b)` if `a` is an integer multiple of `b` (to within 1e-9
/// relative), else `None`.
fn integer_ratio(a: f64, b: f64) -> Option<u64> {
    if !(a > 0.0) || !(b > 0.0) {
        return None;
    }
    let ratio = a / b;
    let rounded = ratio.round();
    if rounded >= 1.0 && (ratio - rounded).abs() <= 1e-9 * ratio.max(1.0) {
        Some(rounded as u64)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn taylor_green(n: usize) -> FlowField {
        FlowField::from_fn(n, |x1, x2| 2.0 * x1.cos() * x2.cos())
    }

    fn unforced(re: f64, dt: f64) -> SolverParams {
        SolverParams {
            reynolds: re,
            forcing_amplitude: 0.0,
            drag_coefficient: 0.0,
            dt,
            ..SolverParams::default()
        }
    }

    #[test]
    fn grf_is_deterministic_per_seed() {
        let a = grf_sample(7, 64).unwrap();
        let b = grf_sample(7, 64).unwrap();
        assert_eq!(a.values, b.values);
        let c = grf_sample(8, 64).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn grf_has_zero_mean() {
        for seed in [0, 1, 42, 1 << 40] {
            let f = grf_sample(seed, 64).unwrap();
            assert!(f.mean().abs() < 1e-10, "mean = {}", f.mean());
        }
    }

    #[test]
    fn grf_rejects_bad_grid_sizes() {
        assert!(grf_sample(0, 48).is_err());
        assert!(grf_sample(0, 8).is_err());
        assert!(grf_sample(0, 16).is_ok());
    }

    #[test]
    fn grf_modal_power_ratio_matches_covariance() {
        // Average |w_hat|^2 over the modes with |k|^2 = 16 vs |k|^2 = 64.
        // The covariance (|k|^2 + 49)^{-5/2} fixes their ratio:
        // P(|k|=8)/P(|k|=4) = ((16+49)/(64+49))^{5/2}, i.e. the |k|=4 shell
        // carries (113/65)^{5/2} ~ 3.98x the power of the |k|=8 shell.
        let n = 64;
        let samples = 4096;
        let mut fft2 = Fft2::new(n);
        let k = fft::wavenumbers(n);
        let (mut p4, mut p8, mut c4, mut c8) = (0.0, 0.0, 0u64, 0u64);
        for seed in 0..samples {
            let f = grf_sample(seed, n).unwrap();
            let mut w = fft::to_complex(&f.values);
            fft2.forward(&mut w);
            for i in 0..n {
                for j in 0..n {
                    let ksq = k[i] * k[i] + k[j] * k[j];
                    if ksq == 16.0 {
                        p4 += w[i * n + j].norm_sqr();
                        c4 += 1;
                    } else if ksq == 64.0 {
                        p8 += w[i * n + j].norm_sqr();
                        c8 += 1;
                    }
                }
            }
        }
        let ratio = (p8 / c8 as f64) / (p4 / c4 as f64);
        let expected = (65.0_f64 / 113.0).powf(2.5);
        assert!(
            (ratio / expected - 1.0).abs() < 0.10,
            "ratio {ratio:.4} vs expected {expected:.4}"
        );
    }

    #[test]
    fn velocity_of_zero_field_is_zero() {
        let (u1, u2) = vorticity_to_velocity(&FlowField::zeros(32));
        assert!(u1.iter().chain(&u2).all(|&v| v == 0.0));
    }

    #[test]
    fn velocity_of_taylor_green_matches_streamfunction_solution() {
        // w = 2 cos(x1) cos(x2)  =>  psi = cos(x1) cos(x2),
        // u = (-cos(x1) sin(x2), sin(x1) cos(x2)).
        let n = 64;
        let f = taylor_green(n);
        let (u1, u2) = vorticity_to_velocity(&f);
        for i in 0..n {
            for j in 0..n {
                let x1 = TAU * j as f64 / n as f64;
                let x2 = TAU * i as f64 / n as f64;
                assert!((u1[i * n + j] - (-x1.cos() * x2.sin())).abs() < 1e-10);
                assert!((u2[i * n + j] - (x1.sin() * x2.cos())).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn velocity_of_single_mode_matches_closed_form() {
        // w = sin(3 x1)  =>  psi = sin(3 x1)/9,  u = (0, -cos(3 x1)/3).
        let n = 64;
        let f = FlowField::from_fn(n, |x1, _| (3.0 * x1).sin());
        let (u1, u2) = vorticity_to_velocity(&f);
        for i in 0..n {
            for j in 0..n {
                let x1 = TAU * j as f64 / n as f64;
                assert!(u1[i * n + j].abs() < 1e-10);
                assert!((u2[i * n + j] - (-(3.0 * x1).cos() / 3.0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_field_is_a_fixed_point_without_forcing() {
        let f = FlowField::zeros(32);
        let stepped = step(&f, &unforced(1000.0, 1e-3)).unwrap();
        assert!(stepped.max_abs() < 1e-14);
        assert_eq!(stepped.time, 1e-3);
    }

    #[test]
    fn taylor_green_decay_matches_analytic_solution() {
        // For w0 = 2 cos(x1) cos(x2) the advection term vanishes identically,
        // so w(t) = w0 * exp(-2t/Re) exactly. At Re = 1000, t = 0.5, 64^2,
        // dt = 1e-3 the numerical error must sit far below 1e-4.
        let n = 64;
        let re = 1000.0;
        let dt = 1e-3;
        let mut field = taylor_green(n);
        let mut stepper = Stepper::new(n, unforced(re, dt)).unwrap();
        for _ in 0..500 {
            field = stepper.step_field(&field).unwrap();
        }
        let t = 0.5;
        let exact = FlowField::from_fn(n, |x1, x2| {
            2.0 * x1.cos() * x2.cos() * (-2.0 * t / re).exp()
        });
        let err = rel_l2(&field.values, &exact.values);
        assert!(err < 1e-4, "relative L2 error {err:.3e}");
        assert!((field.time - t).abs() < 1e-12);
    }

    #[test]
    fn taylor_green_error_converges_at_second_order() {
        // At Re = 1000 the scheme's truncation error on this flow sits below
        // round-off, so the order is measured at Re = 1 where the viscous
        // decay is fast enough for truncation to dominate.
        let n = 32;
        let re = 1.0;
        let t = 0.5;
        let err_at = |dt: f64| {
            let mut field = taylor_green(n);
            let mut stepper = Stepper::new(n, unforced(re, dt)).unwrap();
            let steps = (t / dt).round() as usize;
            for _ in 0..steps {
                field = stepper.step_field(&field).unwrap();
            }
            let exact = FlowField::from_fn(n, |x1, x2| {
                2.0 * x1.cos() * x2.cos() * (-2.0 * t / re).exp()
            });
            rel_l2(&field.values, &exact.values)
        };
        let coarse = err_at(1e-3);
        let fine = err_at(5e-4);
        let ratio = coarse / fine;
        assert!(
            ratio >= 3.5,
            "halving dt improved the error by {ratio:.2}x (coarse {coarse:.3e}, fine {fine:.3e})"
        );
    }

    #[test]
    fn forced_steps_preserve_zero_mean() {
        // Forcing -4 cos(4 x2) - 0.1 w has zero spatial mean, so the field
        // mean stays pinned at zero.
        let n = 64;
        let mut field = FlowField::from_fn(n, |_, x2| 1e-3 * (4.0 * x2).sin());
        let params = SolverParams {
            dt: 1e-3,
            ..SolverParams::default()
        };
        let mut stepper = Stepper::new(n, params).unwrap();
        for _ in 0..50 {
            field = stepper.step_field(&field).unwrap();
            assert!(field.mean().abs() < 1e-10);
        }
        assert!(field.max_abs() > 1e-3); // forcing injected energy
    }

    #[test]
    fn simulate_returns_inclusive_endpoint_frames() {
        let initial = grf_sample(3, 32).unwrap();
        let params = SolverParams {
            dt: 1.0 / 64.0,
            ..SolverParams::default()
        };
        let traj = simulate(&initial, 0.5, 1.0 / 16.0, &params, 3).unwrap();
        assert_eq!(traj.frames.len(), 9); // 0.5 / (1/16) + 1
        for (m, frame) in traj.frames.iter().enumerate() {
            assert!((frame.time - m as f64 / 16.0).abs() < 1e-12);
        }
        assert_eq!(traj.frames[0].values, initial.values);
    }

    #[test]
    fn simulate_zero_duration_returns_initial_only() {
        let initial = grf_sample(5, 32).unwrap();
        let traj = simulate(&initial, 0.0, 1.0 / 32.0, &SolverParams::default(), 5).unwrap();
        assert_eq!(traj.frames.len(), 1);
        assert_eq!(traj.frames[0].values, initial.values);
    }

    #[test]
    fn simulate_rejects_non_multiple_interval() {
        let initial = grf_sample(5, 32).unwrap();
        let params = SolverParams {
            dt: 1e-3,
            ..SolverParams::default()
        };
        let err = simulate(&initial, 1.0, 0.0015, &params, 5).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn simulate_rejects_cfl_violation() {
        let initial = taylor_green(64); // max |u| = 1
        let params = SolverParams {
            dt: 0.125, // bound is 0.5 * (2 pi / 64) / 1 ~ 0.049
            forcing_amplitude: 0.0,
            drag_coefficient: 0.0,
            ..SolverParams::default()
        };
        let err = simulate(&initial, 0.25, 0.125, &params, 0).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("CFL"), "message: {msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn blowup_reports_instability_with_time() {
        let n = 32;
        let field = FlowField {
            n,
            values: FlowField::from_fn(n, |x1, x2| 1e160 * (x1.sin() + (2.0 * x2).cos()))
                .values,
            time: 0.0,
        };
        let params = SolverParams {
            dt: 1.0,
            ..SolverParams::default()
        };
        let mut stepper = Stepper::new(n, params).unwrap();
        let mut f = field;
        let mut saw_instability = false;
        for _ in 0..4 {
            match stepper.step_field(&f) {
                Ok(next) => f = next,
                Err(Error::Instability { time, .. }) => {
                    assert!(time > 0.0);
                    saw_instability = true;
                    break;
                }
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
        assert!(saw_instability, "advection of a 1e160 field must overflow");
    }

    #[test]
    fn simulate_is_deterministic() {
        let initial = grf_sample(11, 32).unwrap();
        let params = SolverParams {
            dt: 1.0 / 64.0,
            ..SolverParams::default()
        };
        let a = simulate(&initial, 0.25, 1.0 / 16.0, &params, 11).unwrap();
        let b = simulate(&initial, 0.25, 1.0 / 16.0, &params, 11).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.values, fb.values);
        }
    }
}
