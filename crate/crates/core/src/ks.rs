//! Kuramoto-Sivashinsky data generation.
//!
//! Integrates `u_t = -u u_s - u_ss - u_ssss` on a periodic domain of length
//! `L` with a Fourier pseudospectral discretization. The linear part is
//! diagonal in Fourier space and handled exactly by ETDRK4; the quadratic
//! nonlinearity `-u u_s = -(u²)_s / 2` is evaluated on a 3/2-refined grid
//! so that no aliased content survives the truncation back to `M` modes.
//!
//! Spectra use the real-to-complex half layout: entry `m` (`0 <= m <= M/2`)
//! holds `û_m` with `u_j = Σ_m û_m exp(2πi m j / M)`, negative modes implied
//! by conjugate symmetry. The Nyquist entry `m = M/2` is kept at zero.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spectral amplitude beyond which a trajectory is declared unstable.
pub const BLOWUP_THRESHOLD: f64 = 1e10;

/// Number of contour points used for the ETDRK4 φ-function averages.
pub const CONTOUR_POINTS: usize = 32;

/// Parameters of a KS run. Defaults are the chaotic `L = 22` setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsConfig {
    /// Domain length.
    pub length: f64,
    /// Number of grid points / Fourier modes (even).
    pub modes: usize,
    /// Integration timestep.
    pub dt: f64,
    /// Steps discarded before the first snapshot.
    pub spinup_steps: usize,
    /// Steps between stored snapshots.
    pub collect_every: usize,
    pub n_snapshots: usize,
    /// Value given to Fourier modes 1..=4 of the initial condition.
    pub init_coeff: f64,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self {
            length: 22.0,
            modes: 64,
            dt: 0.25,
            spinup_steps: 10_000,
            collect_every: 4,
            n_snapshots: 563,
            init_coeff: 0.6,
        }
    }
}

impl KsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "domain length must be positive, got {}",
                self.length
            )));
        }
        if self.modes < 8 || self.modes % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "mode count must be even and at least 8, got {}",
                self.modes
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "timestep must be positive, got {}",
                self.dt
            )));
        }
        if self.collect_every == 0 || self.n_snapshots == 0 {
            return Err(Error::InvalidParameter(
                "collect_every and n_snapshots must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Time between stored snapshots.
    pub fn sample_dt(&self) -> f64 {
        self.dt * self.collect_every as f64
    }

    /// Initial half spectrum: modes 1 through 4 set to `init_coeff`, all
    /// others zero.
    pub fn initial_spectrum(&self) -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); self.modes / 2 + 1];
        for m in 1..=4.min(self.modes / 2 - 1) {
            v[m] = Complex64::new(self.init_coeff, 0.0);
        }
        v
    }

    /// Angular wavenumbers `2πm/L` for the half spectrum, Nyquist zeroed.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let half = self.modes / 2;
        (0..=half)
            .map(|m| {
                if m == half {
                    0.0
                } else {
                    2.0 * std::f64::consts::PI * m as f64 / self.length
                }
            })
            .collect()
    }

    /// Fourier symbol of the linear operator `-∂² - ∂⁴`: `k² - k⁴`.
    pub fn linear_symbol(&self) -> Vec<f64> {
        self.wavenumbers()
            .into_iter()
            .map(|k| k * k - k.powi(4))
            .collect()
    }
}

/// Space-time samples `u(t_n, s_m)` on the periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatiotemporalDataset {
    /// `n_snapshots × M`, one row per stored time.
    pub snapshots: Array2<f64>,
    pub length: f64,
    pub sample_dt: f64,
    /// Time of the first row.
    pub start_time: f64,
}

impl SpatiotemporalDataset {
    pub fn n_snapshots(&self) -> usize {
        self.snapshots.nrows()
    }

    pub fn n_space(&self) -> usize {
        self.snapshots.ncols()
    }

    /// Grid points `-L/2 + jL/M`.
    pub fn grid(&self) -> Vec<f64> {
        let m = self.n_space();
        (0..m)
            .map(|j| -self.length / 2.0 + j as f64 * self.length / m as f64)
            .collect()
    }

    pub fn time(&self, n: usize) -> f64 {
        self.start_time + n as f64 * self.sample_dt
    }

    /// Every snapshot shifted circularly so that new `u[j] = old u[j - shift]`.
    pub fn circular_shift(&self, shift: usize) -> Self {
        let m = self.n_space();
        let mut out = self.clone();
        for (mut dst, src) in out.snapshots.rows_mut().into_iter().zip(self.snapshots.rows()) {
            for j in 0..m {
                dst[(j + shift) % m] = src[j];
            }
        }
        out
    }
}

/// FFT plans for the coarse (`M`) and dealiasing (`3M/2`) grids.
pub struct SpectralGrid {
    modes: usize,
    fine: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    fine_forward: Arc<dyn Fft<f64>>,
    fine_inverse: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    fine_buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl SpectralGrid {
    pub fn new(modes: usize) -> Self {
        assert!(modes >= 4 && modes % 2 == 0, "mode count must be even");
        let fine = 3 * modes / 2;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(modes);
        let inverse = planner.plan_fft_inverse(modes);
        let fine_forward = planner.plan_fft_forward(fine);
        let fine_inverse = planner.plan_fft_inverse(fine);
        let scratch_len = [&forward, &inverse, &fine_forward, &fine_inverse]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            modes,
            fine,
            forward,
            inverse,
            fine_forward,
            fine_inverse,
            buf: vec![Complex64::default(); modes],
            fine_buf: vec![Complex64::default(); fine],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    fn fill_hermitian(half: &[Complex64], full: &mut [Complex64], nyquist: usize) {
        let len = full.len();
        full.iter_mut().for_each(|c| *c = Complex64::default());
        full[0] = Complex64::new(half[0].re, 0.0);
        for m in 1..nyquist {
            full[m] = half[m];
            full[len - m] = half[m].conj();
        }
    }

    /// Physical values on the `M`-point grid; also returns the largest
    /// imaginary residue of the inverse transform.
    pub fn to_physical_checked(&mut self, half: &[Complex64]) -> (Vec<f64>, f64) {
        assert_eq!(half.len(), self.modes / 2 + 1);
        Self::fill_hermitian(half, &mut self.buf, self.modes / 2);
        self.inverse
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        let imag = self.buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        (self.buf.iter().map(|c| c.re).collect(), imag)
    }

    pub fn to_physical(&mut self, half: &[Complex64]) -> Vec<f64> {
        self.to_physical_checked(half).0
    }

    pub fn to_spectral(&mut self, u: &[f64]) -> Vec<Complex64> {
        assert_eq!(u.len(), self.modes);
        for (b, &x) in self.buf.iter_mut().zip(u) {
            *b = Complex64::new(x, 0.0);
        }
        self.forward
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        let scale = 1.0 / self.modes as f64;
        let half = self.modes / 2;
        let mut out: Vec<Complex64> = self.buf[..=half].iter().map(|c| c * scale).collect();
        out[half] = Complex64::default();
        out[0].im = 0.0;
        out
    }

    /// Spectrum of the product `u·v` truncated to `M` modes, computed on the
    /// `3M/2` grid.
    pub fn dealiased_product(&mut self, u_hat: &[Complex64], v_hat: &[Complex64]) -> Vec<Complex64> {
        let half = self.modes / 2;
        assert_eq!(u_hat.len(), half + 1);
        assert_eq!(v_hat.len(), half + 1);
        Self::fill_hermitian(u_hat, &mut self.fine_buf, half);
        self.fine_inverse
            .process_with_scratch(&mut self.fine_buf, &mut self.scratch);
        // u is real: keep it in the real parts while v is transformed in `buf`.
        let u: Vec<f64> = self.fine_buf.iter().map(|c| c.re).collect();
        Self::fill_hermitian(v_hat, &mut self.fine_buf, half);
        self.fine_inverse
            .process_with_scratch(&mut self.fine_buf, &mut self.scratch);
        for (c, &x) in self.fine_buf.iter_mut().zip(&u) {
            *c = Complex64::new(c.re * x, 0.0);
        }
        self.fine_forward
            .process_with_scratch(&mut self.fine_buf, &mut self.scratch);
        let scale = 1.0 / self.fine as f64;
        let mut out: Vec<Complex64> = self.fine_buf[..=half].iter().map(|c| c * scale).collect();
        out[half] = Complex64::default();
        out[0].im = 0.0;
        out
    }
}

/// Dealiased spectral product of two real fields given as half spectra of
/// equal length `M/2 + 1`.
pub fn dealias_three_halves(u_hat: &[Complex64], v_hat: &[Complex64]) -> Vec<Complex64> {
    let modes = 2 * (u_hat.len() - 1);
    SpectralGrid::new(modes).dealiased_product(u_hat, v_hat)
}

/// Mean of `f` over `points` equispaced nodes on the unit circle centred at
/// `z`. The node set is symmetric about the real axis.
pub fn contour_average(z: f64, points: usize, f: impl Fn(Complex64) -> Complex64) -> Complex64 {
    let sum: Complex64 = (0..points)
        .map(|j| {
            let theta = std::f64::consts::PI * (2.0 * j as f64 + 1.0) / points as f64;
            f(Complex64::new(z, 0.0) + Complex64::from_polar(1.0, theta))
        })
        .sum();
    sum / points as f64
}

/// ETDRK4 coefficient vectors for a diagonal linear operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Etdrk4Coefficients {
    /// `exp(h ℓ)`
    pub e: Vec<f64>,
    /// `exp(h ℓ / 2)`
    pub e_half: Vec<f64>,
    /// half-step weight `h (e^{z/2} - 1) / z`
    pub q: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
}

/// Evaluates the ETDRK4 weights for symbol values `ℓ` and timestep `h` by
/// contour averaging, which removes the cancellation of the closed forms
/// near `z = hℓ = 0`.
pub fn etdrk4_coefficients(symbol: &[f64], dt: f64, points: usize) -> Etdrk4Coefficients {
    let one = Complex64::new(1.0, 0.0);
    let mut c = Etdrk4Coefficients {
        e: Vec::with_capacity(symbol.len()),
        e_half: Vec::with_capacity(symbol.len()),
        q: Vec::with_capacity(symbol.len()),
        f1: Vec::with_capacity(symbol.len()),
        f2: Vec::with_capacity(symbol.len()),
        f3: Vec::with_capacity(symbol.len()),
    };
    for &l in symbol {
        let z = dt * l;
        c.e.push(z.exp());
        c.e_half.push((z / 2.0).exp());
        c.q.push(dt * contour_average(z, points, |r| ((r / 2.0).exp() - one) / r).re);
        c.f1.push(
            dt * contour_average(z, points, |r| {
                (-4.0 - r + r.exp() * (4.0 - 3.0 * r + r * r)) / (r * r * r)
            })
            .re,
        );
        c.f2.push(
            dt * contour_average(z, points, |r| (2.0 + r + r.exp() * (r - 2.0)) / (r * r * r)).re,
        );
        c.f3.push(
            dt * contour_average(z, points, |r| {
                (-4.0 - 3.0 * r - r * r + r.exp() * (4.0 - r)) / (r * r * r)
            })
            .re,
        );
    }
    c
}

/// Fixed-step ETDRK4 integrator on half spectra.
pub struct KsSolver {
    coeffs: Etdrk4Coefficients,
    wavenumbers: Vec<f64>,
    grid: SpectralGrid,
    nonlinear: bool,
}

impl KsSolver {
    pub fn new(cfg: &KsConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            coeffs: etdrk4_coefficients(&cfg.linear_symbol(), cfg.dt, CONTOUR_POINTS),
            wavenumbers: cfg.wavenumbers(),
            grid: SpectralGrid::new(cfg.modes),
            nonlinear: true,
        })
    }

    /// Drops the nonlinear term, leaving the exactly solvable linear flow.
    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn grid(&mut self) -> &mut SpectralGrid {
        &mut self.grid
    }

    fn nonlinear_term(&mut self, v: &[Complex64]) -> Vec<Complex64> {
        if !self.nonlinear {
            return vec![Complex64::default(); v.len()];
        }
        let sq = self.grid.dealiased_product(v, v);
        sq.iter()
            .zip(&self.wavenumbers)
            .map(|(p, &k)| Complex64::new(0.0, -0.5 * k) * p)
            .collect()
    }

    pub fn step(&mut self, v: &mut [Complex64]) {
        let nv = self.nonlinear_term(v);
        let c = &self.coeffs;
        let a: Vec<Complex64> = (0..v.len()).map(|m| v[m] * c.e_half[m] + nv[m] * c.q[m]).collect();
        let na = self.nonlinear_term(&a);
        let c = &self.coeffs;
        let b: Vec<Complex64> = (0..v.len()).map(|m| v[m] * c.e_half[m] + na[m] * c.q[m]).collect();
        let nb = self.nonlinear_term(&b);
        let c = &self.coeffs;
        let cc: Vec<Complex64> = (0..v.len())
            .map(|m| a[m] * c.e_half[m] + (nb[m] * 2.0 - nv[m]) * c.q[m])
            .collect();
        let nc = self.nonlinear_term(&cc);
        let c = &self.coeffs;
        for m in 0..v.len() {
            v[m] = v[m] * c.e[m] + nv[m] * c.f1[m] + (na[m] + nb[m]) * (2.0 * c.f2[m]) + nc[m] * c.f3[m];
        }
    }

    /// Advances `steps` steps; `offset` is only used to number the step in
    /// an instability error.
    pub fn advance(&mut self, v: &mut [Complex64], steps: usize, offset: usize) -> Result<()> {
        for s in 0..steps {
            self.step(v);
            let bad = v
                .iter()
                .any(|c| !(c.re.is_finite() && c.im.is_finite()) || c.norm() > BLOWUP_THRESHOLD);
            if bad {
                return Err(Error::Instability {
                    step: offset + s + 1,
                });
            }
        }
        Ok(())
    }
}

/// Runs the configured trajectory: spinup, then one snapshot every
/// `collect_every` steps, the first taken right after spinup.
pub fn etdrk4_integrate(cfg: &KsConfig) -> Result<SpatiotemporalDataset> {
    let mut solver = KsSolver::new(cfg)?;
    let mut v = cfg.initial_spectrum();
    solver.advance(&mut v, cfg.spinup_steps, 0)?;
    let mut snapshots = Array2::zeros((cfg.n_snapshots, cfg.modes));
    let mut step = cfg.spinup_steps;
    for n in 0..cfg.n_snapshots {
        if n > 0 {
            solver.advance(&mut v, cfg.collect_every, step)?;
            step += cfg.collect_every;
        }
        let u = solver.grid().to_physical(&v);
        snapshots.row_mut(n).assign(&ndarray::ArrayView1::from(&u));
    }
    Ok(SpatiotemporalDataset {
        snapshots,
        length: cfg.length,
        sample_dt: cfg.sample_dt(),
        start_time: cfg.spinup_steps as f64 * cfg.dt,
    })
}
