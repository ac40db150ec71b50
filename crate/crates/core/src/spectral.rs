//! Discrete Fourier machinery for periodic fields on uniform 1D/2D grids.
//!
//! Conventions:
//! - fields are stored row-major, axis 0 slowest;
//! - the forward transform carries the `1/N` factor, so `coeffs[0]` is the
//!   field mean and the inverse transform is a plain sum;
//! - spectra are kept in standard DFT ordering (`0, 1, .., N/2, -N/2+1, .., -1`)
//!   and are projected onto the Hermitian subspace after every operation, so the
//!   unmatched Nyquist coefficient is always real.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Relative tolerance used when checking Hermitian symmetry of an input spectrum.
pub const HERMITIAN_TOL: f64 = 1e-12;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Uniform periodic grid on `[0, L_0) x [0, L_1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    points: Vec<usize>,
    lengths: Vec<f64>,
}

impl GridSpec {
    pub fn new(points: &[usize], lengths: &[f64]) -> Result<Self> {
        if points.is_empty() || points.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 1 or 2, got {}",
                points.len()
            )));
        }
        if lengths.len() != points.len() {
            return Err(Error::InvalidGrid(
                "one domain length per axis is required".into(),
            ));
        }
        for &n in points {
            if n < 4 || n % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "points per axis must be even and >= 4, got {n}"
                )));
            }
        }
        for &l in lengths {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "domain length must be positive, got {l}"
                )));
            }
        }
        Ok(Self {
            points: points.to_vec(),
            lengths: lengths.to_vec(),
        })
    }

    pub fn new_1d(n: usize, length: f64) -> Result<Self> {
        Self::new(&[n], &[length])
    }

    pub fn new_2d(nx: usize, ny: usize, length: f64) -> Result<Self> {
        Self::new(&[nx, ny], &[length, length])
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// Total number of grid nodes.
    pub fn size(&self) -> usize {
        self.points.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.points[axis] as f64
    }

    /// Volume of one grid cell; the rectangle-rule quadrature weight.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn domain_volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Coordinates of the nodes along one axis.
    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        let h = self.spacing(axis);
        (0..self.points[axis]).map(|j| j as f64 * h).collect()
    }

    /// Per-axis index of flat node `idx`.
    pub fn unravel(&self, idx: usize) -> [usize; 2] {
        match self.dim() {
            1 => [idx, 0],
            _ => [idx / self.points[1], idx % self.points[1]],
        }
    }
}

/// Signed mode number of DFT index `i` on an `n`-point axis; the Nyquist index maps to `+n/2`.
pub fn signed_mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn mirror_index(i: usize, n: usize) -> usize {
    (n - i) % n
}

/// Real samples of a periodic field.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGridField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl RealGridField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.size() {
            return Err(Error::InvalidField(format!(
                "expected {} values, got {}",
                grid.size(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!(
                "non-finite value at node {i}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let values = vec![0.0; grid.size()];
        Self { grid, values }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        let values = vec![value; grid.size()];
        Self { grid, values }
    }

    /// Samples `f` at the grid nodes (`f` receives `[x, y]`; `y = 0` in 1D).
    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let h: Vec<f64> = (0..grid.dim()).map(|a| grid.spacing(a)).collect();
        let values = (0..grid.size())
            .map(|idx| {
                let [i, j] = grid.unravel(idx);
                let y = if grid.dim() == 2 { j as f64 * h[1] } else { 0.0 };
                f([i as f64 * h[0], y])
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rectangle-rule integral over the domain.
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Fourier coefficients of a real periodic field, full DFT layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: GridSpec,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    /// Wraps raw coefficients without any symmetry check.
    pub fn from_coeffs(grid: GridSpec, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.size() {
            return Err(Error::InvalidField(format!(
                "expected {} coefficients, got {}",
                grid.size(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let coeffs = vec![Complex64::new(0.0, 0.0); grid.size()];
        Self { grid, coeffs }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Flat index of the signed mode tuple `k` (second entry ignored in 1D).
    pub fn index_of(&self, k: [i64; 2]) -> usize {
        let p = self.grid.points();
        let wrap = |k: i64, n: usize| k.rem_euclid(n as i64) as usize;
        match p.len() {
            1 => wrap(k[0], p[0]),
            _ => wrap(k[0], p[0]) * p[1] + wrap(k[1], p[1]),
        }
    }

    pub fn coeff(&self, k: [i64; 2]) -> Complex64 {
        self.coeffs[self.index_of(k)]
    }

    pub fn set_coeff(&mut self, k: [i64; 2], value: Complex64) {
        let i = self.index_of(k);
        self.coeffs[i] = value;
    }

    fn mirror_flat(&self, idx: usize) -> usize {
        let p = self.grid.points();
        match p.len() {
            1 => mirror_index(idx, p[0]),
            _ => {
                let (i, j) = (idx / p[1], idx % p[1]);
                mirror_index(i, p[0]) * p[1] + mirror_index(j, p[1])
            }
        }
    }

    /// Largest `|c[k] - conj(c[-k])|`, relative to the largest coefficient magnitude.
    pub fn hermitian_violation(&self) -> (f64, usize) {
        let scale = self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.norm()));
        if scale == 0.0 {
            return (0.0, 0);
        }
        let mut worst = (0.0, 0);
        for idx in 0..self.coeffs.len() {
            let m = self.mirror_flat(idx);
            let d = (self.coeffs[idx] - self.coeffs[m].conj()).norm() / scale;
            if d > worst.0 {
                worst = (d, idx);
            }
        }
        worst
    }

    /// Projects onto Hermitian-symmetric spectra: `c[k] <- (c[k] + conj(c[-k]))/2`.
    pub fn enforce_hermitian(&mut self) {
        for idx in 0..self.coeffs.len() {
            let m = self.mirror_flat(idx);
            if m < idx {
                continue;
            }
            if m == idx {
                self.coeffs[idx].im = 0.0;
            } else {
                let avg = (self.coeffs[idx] + self.coeffs[m].conj()) * 0.5;
                self.coeffs[idx] = avg;
                self.coeffs[m] = avg.conj();
            }
        }
    }

    /// `sum_k |c_k|^2`, equal to the mean square of the field (Parseval).
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Multiplies every mode by `f(k)` and re-projects onto the Hermitian subspace.
    pub fn apply_multiplier(&self, f: impl Fn([i64; 2]) -> Complex64) -> Self {
        let wn = WaveNumbers::new(&self.grid);
        let coeffs = self
            .coeffs
            .iter()
            .zip(wn.modes())
            .map(|(&c, &k)| c * f(k))
            .collect();
        let mut out = Self {
            grid: self.grid.clone(),
            coeffs,
        };
        out.enforce_hermitian();
        out
    }

    /// Zeros every mode with `|k_a| > N_a / 3` on some axis (2/3 rule).
    pub fn dealias_two_thirds(&mut self) {
        let p = self.grid.points().to_vec();
        let wn = WaveNumbers::new(&self.grid);
        for (c, k) in self.coeffs.iter_mut().zip(wn.modes()) {
            let cut = (0..p.len()).any(|a| 3 * k[a].unsigned_abs() as usize > p[a]);
            if cut {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Per-mode signed indices and squared angular wavenumbers `sum_a (2 pi k_a / L_a)^2`.
#[derive(Debug, Clone)]
pub struct WaveNumbers {
    modes: Vec<[i64; 2]>,
    k_squared: Vec<f64>,
}

impl WaveNumbers {
    pub fn new(grid: &GridSpec) -> Self {
        let p = grid.points();
        let l = grid.lengths();
        let mut modes = Vec::with_capacity(grid.size());
        let mut k_squared = Vec::with_capacity(grid.size());
        for idx in 0..grid.size() {
            let [i, j] = grid.unravel(idx);
            let k0 = signed_mode(i, p[0]);
            let k1 = if p.len() == 2 { signed_mode(j, p[1]) } else { 0 };
            let mut ks = (2.0 * PI * k0 as f64 / l[0]).powi(2);
            if p.len() == 2 {
                ks += (2.0 * PI * k1 as f64 / l[1]).powi(2);
            }
            modes.push([k0, k1]);
            k_squared.push(ks);
        }
        Self { modes, k_squared }
    }

    pub fn modes(&self) -> &[[i64; 2]] {
        &self.modes
    }

    pub fn k_squared(&self) -> &[f64] {
        &self.k_squared
    }
}

fn transform_axis(data: &mut [Complex64], points: &[usize], axis: usize, inverse: bool) {
    let n = points[axis];
    let plan = fft_plan(n, inverse);
    if points.len() == 1 {
        plan.process(data);
        return;
    }
    let (n0, n1) = (points[0], points[1]);
    if axis == 1 {
        for row in data.chunks_exact_mut(n1) {
            plan.process(row);
        }
    } else {
        let mut col = vec![Complex64::new(0.0, 0.0); n0];
        for j in 0..n1 {
            for i in 0..n0 {
                col[i] = data[i * n1 + j];
            }
            plan.process(&mut col);
            for i in 0..n0 {
                data[i * n1 + j] = col[i];
            }
        }
    }
}

/// `c[k] = (1/N) sum_j u_j exp(-2 pi i <j,k>/N)`, Hermitian-projected.
pub fn forward_transform(field: &RealGridField) -> Result<SpectralField> {
    if let Some(i) = field.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidField(format!("non-finite value at node {i}")));
    }
    let grid = field.grid.clone();
    let mut data: Vec<Complex64> = field
        .values
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for axis in (0..grid.dim()).rev() {
        transform_axis(&mut data, grid.points(), axis, false);
    }
    let scale = 1.0 / grid.size() as f64;
    for c in &mut data {
        *c *= scale;
    }
    let mut spec = SpectralField { grid, coeffs: data };
    spec.enforce_hermitian();
    Ok(spec)
}

/// `u_j = sum_k c[k] exp(2 pi i <j,k>/N)`; rejects spectra that are not Hermitian.
pub fn inverse_transform(spec: &SpectralField) -> Result<RealGridField> {
    let (violation, index) = spec.hermitian_violation();
    if violation > HERMITIAN_TOL {
        return Err(Error::HermitianViolation { violation, index });
    }
    Ok(inverse_unchecked(spec))
}

/// Inverse transform of a spectrum assumed Hermitian; imaginary residue is dropped.
pub(crate) fn inverse_unchecked(spec: &SpectralField) -> RealGridField {
    let grid = spec.grid.clone();
    let mut data = spec.coeffs.clone();
    for axis in 0..grid.dim() {
        transform_axis(&mut data, grid.points(), axis, true);
    }
    RealGridField {
        grid,
        values: data.into_iter().map(|c| c.re).collect(),
    }
}

/// Multiplies each coefficient by `(2 pi i k_axis / L_axis)^order`.
pub fn spectral_derivative(spec: &SpectralField, order: u32, axis: usize) -> Result<SpectralField> {
    if order == 0 || order > 4 {
        return Err(Error::Config(format!(
            "derivative order must be in 1..=4, got {order}"
        )));
    }
    if axis >= spec.grid.dim() {
        return Err(Error::Config(format!(
            "axis {axis} out of range for a {}-D grid",
            spec.grid.dim()
        )));
    }
    let l = spec.grid.lengths()[axis];
    Ok(spec.apply_multiplier(|k| {
        Complex64::new(0.0, 2.0 * PI * k[axis] as f64 / l).powu(order)
    }))
}

/// Low-mode block of a spectrum.
///
/// 1D: coefficients for `k = 0..=cutoff` (the Hermitian half-spectrum).
/// 2D: `k_0 = 0..=cutoff` (outer) by `k_1 = -cutoff..=cutoff` (inner).
pub fn truncate_modes(spec: &SpectralField, cutoff: usize) -> Result<Vec<Complex64>> {
    let p = spec.grid.points();
    let available = p.iter().copied().min().unwrap_or(0) / 2;
    if cutoff == 0 || cutoff > available {
        return Err(Error::ModeRangeError { cutoff, available });
    }
    let c = cutoff as i64;
    Ok(match p.len() {
        1 => (0..=c).map(|k| spec.coeff([k, 0])).collect(),
        _ => (0..=c)
            .flat_map(|k0| (-c..=c).map(move |k1| [k0, k1]))
            .map(|k| spec.coeff(k))
            .collect(),
    })
}

/// Inverse of [`truncate_modes`]: zero-pads the low-mode block back onto `grid`
/// and completes the negative modes by Hermitian symmetry.
pub fn embed_modes(grid: &GridSpec, modes: &[Complex64], cutoff: usize) -> Result<SpectralField> {
    let p = grid.points();
    let available = p.iter().copied().min().unwrap_or(0) / 2;
    if cutoff == 0 || cutoff > available {
        return Err(Error::ModeRangeError { cutoff, available });
    }
    let c = cutoff as i64;
    let keys: Vec<[i64; 2]> = match p.len() {
        1 => (0..=c).map(|k| [k, 0]).collect(),
        _ => (0..=c)
            .flat_map(|k0| (-c..=c).map(move |k1| [k0, k1]))
            .collect(),
    };
    if keys.len() != modes.len() {
        return Err(Error::Shape(format!(
            "expected {} modes for cutoff {cutoff}, got {}",
            keys.len(),
            modes.len()
        )));
    }
    let mut spec = SpectralField::zeros(grid.clone());
    for (&k, &v) in keys.iter().zip(modes) {
        spec.set_coeff(k, v);
        spec.set_coeff([-k[0], -k[1]], v.conj());
    }
    // k_0 = 0 row in 2D carries both k_1 and -k_1; average them back to symmetry.
    spec.enforce_hermitian();
    Ok(spec)
}
