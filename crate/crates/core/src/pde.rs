//! Semi-implicit pseudo-spectral reference solvers.
//!
//! Both models are written as `u_t = -(M + W) mu`, `mu = L u + N(u)`, with the
//! multipliers diagonal in Fourier space. The linear part `L` is treated
//! implicitly and the pointwise nonlinearity `N` explicitly.
//!
//! | model      | M | W            | L                | N(u)        |
//! |------------|---|--------------|------------------|-------------|
//! | Allen-Cahn | 1 | 0            | kappa^2 - 1/eps^2 | u^3 / eps^2 |
//! | KdV        | 0 | -2 pi i k/L  | b kappa^2        | -(a/2) u^2  |
//!
//! KdV is `u_t + a u u_x + b u_xxx = 0` along axis 0.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dataset::{random_initial_condition, trajectory_seeds, IcConfig, Trajectory};
use crate::error::{Error, Result};
use crate::spectral::{
    forward_transform, inverse_unchecked, GridSpec, RealGridField, SpectralField, WaveNumbers,
};

/// Denominators with modulus below this are treated as singular.
const SINGULAR_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeKind {
    AllenCahn,
    Kdv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeModel {
    pub kind: PdeKind,
    pub ac_epsilon: f64,
    pub kdv_a: f64,
    pub kdv_b: f64,
    /// Zero the upper third of the nonlinear term's spectrum.
    pub dealias: bool,
}

impl PdeModel {
    pub fn allen_cahn(epsilon: f64) -> Self {
        Self {
            kind: PdeKind::AllenCahn,
            ac_epsilon: epsilon,
            kdv_a: 6.0,
            kdv_b: 1.0,
            dealias: false,
        }
    }

    pub fn kdv() -> Self {
        Self::kdv_with(6.0, 1.0)
    }

    pub fn kdv_with(a: f64, b: f64) -> Self {
        Self {
            kind: PdeKind::Kdv,
            ac_epsilon: 0.1,
            kdv_a: a,
            kdv_b: b,
            dealias: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PdeKind::AllenCahn => "allen-cahn",
            PdeKind::Kdv => "kdv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PdeKind::AllenCahn if !(self.ac_epsilon > 0.0) => Err(Error::Config(format!(
                "allen-cahn epsilon must be positive, got {}",
                self.ac_epsilon
            ))),
            PdeKind::Kdv if !(self.kdv_a.is_finite() && self.kdv_b.is_finite()) => {
                Err(Error::Config("kdv coefficients must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// `M(k) + W(k)` per mode.
    pub fn transport(&self, wn: &WaveNumbers, length0: f64) -> Vec<Complex64> {
        wn.modes()
            .iter()
            .map(|k| match self.kind {
                PdeKind::AllenCahn => Complex64::new(1.0, 0.0),
                PdeKind::Kdv => Complex64::new(0.0, -2.0 * PI * k[0] as f64 / length0),
            })
            .collect()
    }

    /// Linear multiplier `L(k)` per mode.
    pub fn linear(&self, wn: &WaveNumbers) -> Vec<f64> {
        wn.k_squared()
            .iter()
            .map(|&ks| match self.kind {
                PdeKind::AllenCahn => ks - 1.0 / (self.ac_epsilon * self.ac_epsilon),
                PdeKind::Kdv => self.kdv_b * ks,
            })
            .collect()
    }

    /// Pointwise nonlinear part `N(u)`.
    pub fn nonlinear(&self, u: f64) -> f64 {
        match self.kind {
            PdeKind::AllenCahn => u * u * u / (self.ac_epsilon * self.ac_epsilon),
            PdeKind::Kdv => -0.5 * self.kdv_a * u * u,
        }
    }

    /// Pointwise part of the free-energy density (everything except the gradient term).
    pub(crate) fn local_energy(&self, u: f64) -> f64 {
        match self.kind {
            PdeKind::AllenCahn => {
                let u2 = u * u;
                -(2.0 * u2 - u2 * u2) / (4.0 * self.ac_epsilon * self.ac_epsilon)
            }
            PdeKind::Kdv => -self.kdv_a / 6.0 * u * u * u,
        }
    }

    fn gradient_weight(&self) -> f64 {
        match self.kind {
            PdeKind::AllenCahn => 1.0,
            PdeKind::Kdv => self.kdv_b,
        }
    }

    /// Spectrum of `mu = L u + N(u)`, the functional derivative of [`free_energy`].
    pub fn mu_hat(&self, u_hat: &SpectralField) -> SpectralField {
        let wn = WaveNumbers::new(u_hat.grid());
        let lin = self.linear(&wn);
        let mut out = self.nonlinear_hat(u_hat);
        for ((o, &c), &l) in out.coeffs_mut().iter_mut().zip(u_hat.coeffs()).zip(&lin) {
            *o += c * l;
        }
        out.enforce_hermitian();
        out
    }

    fn nonlinear_hat(&self, u_hat: &SpectralField) -> SpectralField {
        let u = inverse_unchecked(u_hat);
        let n = RealGridField::new(
            u.grid().clone(),
            u.values().iter().map(|&v| self.nonlinear(v)).collect(),
        );
        let mut nh = match n {
            Ok(n) => forward_transform(&n).expect("finite field"),
            // Overflowing nonlinearity: propagate NaN so the caller reports BlowUp.
            Err(_) => {
                let mut s = SpectralField::zeros(u.grid().clone());
                s.coeffs_mut().fill(Complex64::new(f64::NAN, f64::NAN));
                s
            }
        };
        if self.dealias {
            nh.dealias_two_thirds();
        }
        nh
    }
}

/// Rectangle-rule free energy; the gradient term is evaluated spectrally.
///
/// Allen-Cahn: `int 1/2 |grad u|^2 - (2u^2 - u^4)/(4 eps^2)`.
/// KdV: `int b/2 u_x^2 - a/6 u^3`.
pub fn free_energy(model: &PdeModel, field: &RealGridField) -> f64 {
    let grid = field.grid();
    let spec = forward_transform(field).expect("field invariant guarantees finiteness");
    let wn = WaveNumbers::new(grid);
    let grad_sq: f64 = match model.kind {
        PdeKind::AllenCahn => spec
            .coeffs()
            .iter()
            .zip(wn.k_squared())
            .map(|(c, ks)| ks * c.norm_sqr())
            .sum(),
        // Only the x-derivative enters.
        PdeKind::Kdv => {
            let l0 = grid.lengths()[0];
            spec.coeffs()
                .iter()
                .zip(wn.modes())
                .map(|(c, k)| (2.0 * PI * k[0] as f64 / l0).powi(2) * c.norm_sqr())
                .sum()
        }
    };
    let local: f64 = field.values().iter().map(|&u| model.local_energy(u)).sum();
    0.5 * model.gradient_weight() * grad_sq * grid.domain_volume() + local * grid.cell_volume()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    Sbdf1,
    Sbdf2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub dt_record: f64,
    pub substeps: usize,
    pub n_snapshots: usize,
    pub stepper: Stepper,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt_record: 1e-3,
            substeps: 25,
            n_snapshots: 100,
            stepper: Stepper::Sbdf2,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_record > 0.0 && self.dt_record.is_finite()) {
            return Err(Error::Config(format!(
                "dt_record must be positive, got {}",
                self.dt_record
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be positive".into()));
        }
        if self.n_snapshots < 2 {
            return Err(Error::Config("at least 2 snapshots are required".into()));
        }
        Ok(())
    }

    pub fn dt_internal(&self) -> f64 {
        self.dt_record / self.substeps as f64
    }
}

/// Per-mode multipliers for one fixed grid.
struct Operators {
    transport: Vec<Complex64>,
    linear: Vec<f64>,
}

impl Operators {
    fn new(model: &PdeModel, state: &SpectralField) -> Self {
        let wn = WaveNumbers::new(state.grid());
        Self {
            transport: model.transport(&wn, state.grid().lengths()[0]),
            linear: model.linear(&wn),
        }
    }

    fn sbdf1(&self, u: &SpectralField, n: &SpectralField, dt: f64) -> Result<SpectralField> {
        let mut out = u.clone();
        for (i, o) in out.coeffs_mut().iter_mut().enumerate() {
            let mw = self.transport[i];
            let den = Complex64::new(1.0, 0.0) + mw * self.linear[i] * dt;
            if den.norm() < SINGULAR_TOL {
                return Err(Error::StepperSingular { mode: i });
            }
            *o = (u.coeffs()[i] - mw * n.coeffs()[i] * dt) / den;
        }
        out.enforce_hermitian();
        Ok(out)
    }

    fn sbdf2(
        &self,
        u: &SpectralField,
        n: &SpectralField,
        prev: &SpectralField,
        n_prev: &SpectralField,
        dt: f64,
    ) -> Result<SpectralField> {
        let mut out = u.clone();
        for (i, o) in out.coeffs_mut().iter_mut().enumerate() {
            let mw = self.transport[i];
            let den = Complex64::new(3.0, 0.0) + mw * self.linear[i] * (2.0 * dt);
            if den.norm() < SINGULAR_TOL {
                return Err(Error::StepperSingular { mode: i });
            }
            let extrap = n.coeffs()[i] * 2.0 - n_prev.coeffs()[i];
            *o = (u.coeffs()[i] * 4.0 - prev.coeffs()[i] - mw * extrap * (2.0 * dt)) / den;
        }
        out.enforce_hermitian();
        Ok(out)
    }
}

/// One first-order step: `u+ = (u - dt (M+W) N(u)) / (1 + dt (M+W) L)` per mode.
pub fn sbdf1_step(model: &PdeModel, state: &SpectralField, dt: f64) -> Result<SpectralField> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let ops = Operators::new(model, state);
    ops.sbdf1(state, &model.nonlinear_hat(state), dt)
}

/// One second-order step (standard SBDF2 with extrapolated nonlinearity):
///
/// `(3 u+ - 4 u + u-) / (2 dt) = -(M+W) (L u+ + 2 N(u) - N(u-))`.
pub fn sbdf2_step(
    model: &PdeModel,
    state: &SpectralField,
    prev: &SpectralField,
    dt: f64,
) -> Result<SpectralField> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if state.grid() != prev.grid() {
        return Err(Error::Shape("state and prev live on different grids".into()));
    }
    let ops = Operators::new(model, state);
    ops.sbdf2(
        state,
        &model.nonlinear_hat(state),
        prev,
        &model.nonlinear_hat(prev),
        dt,
    )
}

fn all_finite(s: &SpectralField) -> bool {
    s.coeffs().iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Integrates from `ic`, recording `n_snapshots` fields `dt_record` apart
/// (snapshot 0 is `ic`). SBDF2 runs are bootstrapped with one SBDF1 step.
pub fn simulate_pde(model: &PdeModel, ic: &RealGridField, cfg: &SolverConfig) -> Result<Trajectory> {
    model.validate()?;
    cfg.validate()?;
    let dt = cfg.dt_internal();
    let mut u = forward_transform(ic)?;
    let ops = Operators::new(model, &u);
    let mut n_u = model.nonlinear_hat(&u);
    let mut history: Option<(SpectralField, SpectralField)> = None;
    let mut snapshots = Vec::with_capacity(cfg.n_snapshots);
    snapshots.push(ic.clone());
    let mut step = 0usize;
    for _ in 1..cfg.n_snapshots {
        for _ in 0..cfg.substeps {
            step += 1;
            let next = match (&history, cfg.stepper) {
                (Some((prev, n_prev)), Stepper::Sbdf2) => ops.sbdf2(&u, &n_u, prev, n_prev, dt)?,
                _ => ops.sbdf1(&u, &n_u, dt)?,
            };
            if !all_finite(&next) {
                return Err(Error::BlowUp { step });
            }
            let n_next = model.nonlinear_hat(&next);
            if !all_finite(&n_next) {
                return Err(Error::BlowUp { step });
            }
            history = Some((std::mem::replace(&mut u, next), std::mem::replace(&mut n_u, n_next)));
        }
        snapshots.push(inverse_unchecked(&u));
    }
    let mut meta = BTreeMap::new();
    meta.insert("model".into(), model.name().into());
    match model.kind {
        PdeKind::AllenCahn => {
            meta.insert("epsilon".into(), model.ac_epsilon.to_string());
        }
        PdeKind::Kdv => {
            meta.insert("kdv_a".into(), model.kdv_a.to_string());
            meta.insert("kdv_b".into(), model.kdv_b.to_string());
        }
    }
    meta.insert("substeps".into(), cfg.substeps.to_string());
    meta.insert(
        "stepper".into(),
        match cfg.stepper {
            Stepper::Sbdf1 => "sbdf1",
            Stepper::Sbdf2 => "sbdf2",
        }
        .into(),
    );
    if model.dealias {
        meta.insert("dealias".into(), "2/3".into());
    }
    Trajectory::new(snapshots, cfg.dt_record, meta)
}

/// `n` trajectories from random initial conditions; trajectory `i` uses the
/// `i`-th of [`trajectory_seeds`]`(seed, n)` and records it as `ic_seed`.
pub fn generate_pde_trajectories(
    model: &PdeModel,
    grid: &GridSpec,
    ic: &IcConfig,
    cfg: &SolverConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<Trajectory>> {
    trajectory_seeds(seed, n)
        .into_par_iter()
        .map(|s| {
            let u0 = random_initial_condition(&IcConfig { seed: s, ..ic.clone() }, grid)?;
            let mut t = simulate_pde(model, &u0, cfg)?;
            t.meta_mut().insert("ic_seed".into(), s.to_string());
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::spectral::{inverse_transform, GridSpec};

    fn sech2(x: f64) -> f64 {
        let c = x.cosh();
        1.0 / (c * c)
    }

    #[test]
    fn free_energy_closed_forms() {
        let g = GridSpec::new_1d(64, 1.0).unwrap();
        let zero = RealGridField::zeros(g.clone());
        assert_eq!(free_energy(&PdeModel::allen_cahn(0.1), &zero), 0.0);
        assert_eq!(free_energy(&PdeModel::kdv(), &zero), 0.0);
        let one = RealGridField::constant(g.clone(), 1.0);
        assert!((free_energy(&PdeModel::allen_cahn(0.1), &one) + 25.0).abs() < 1e-12);
        let s = RealGridField::from_fn(g, |x| (2.0 * PI * x[0]).sin()).unwrap();
        assert!((free_energy(&PdeModel::kdv(), &s) - PI * PI).abs() < 1e-12);
    }

    #[test]
    fn kdv_zero_is_fixed_point() {
        let g = GridSpec::new_1d(32, 1.0).unwrap();
        let z = SpectralField::zeros(g);
        let m = PdeModel::kdv();
        assert_eq!(sbdf1_step(&m, &z, 1e-3).unwrap(), z);
        assert_eq!(sbdf2_step(&m, &z, &z, 1e-3).unwrap(), z);
    }

    /// Allen-Cahn with the nonlinearity removed and the `-1/eps^2` shift
    /// cancelled reduces to heat flow.
    fn heat_model() -> PdeModel {
        PdeModel::allen_cahn(1e150)
    }

    #[test]
    fn linear_diffusion_factors() {
        let g = GridSpec::new_1d(16, 1.0).unwrap();
        let mut u = SpectralField::zeros(g);
        u.set_coeff([1, 0], Complex64::new(0.25, -0.5));
        u.set_coeff([-1, 0], Complex64::new(0.25, 0.5));
        let dt = 1e-3;
        let lam = (2.0 * PI).powi(2);
        let m = heat_model();
        let one = sbdf1_step(&m, &u, dt).unwrap();
        let want = u.coeff([1, 0]) / (1.0 + lam * dt);
        assert!((one.coeff([1, 0]) - want).norm() < 1e-15);

        let two = sbdf2_step(&m, &one, &u, dt).unwrap();
        let want2 = (one.coeff([1, 0]) * 4.0 - u.coeff([1, 0])) / (3.0 + 2.0 * dt * lam);
        assert!((two.coeff([1, 0]) - want2).norm() < 1e-15);
    }

    /// Dense physical-space SBDF1 for Allen-Cahn: the spectral Laplacian is
    /// assembled entry by entry and the implicit system solved by Gaussian elimination.
    fn dense_ac_sbdf1(u: &[f64], eps: f64, length: f64, dt: f64) -> Vec<f64> {
        let n = u.len();
        let h = length / n as f64;
        // Second derivative of the trigonometric interpolant, Nyquist included.
        let mut d2 = vec![vec![0.0; n]; n];
        for (i, row) in d2.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for kk in 0..n {
                    let k = if kk <= n / 2 { kk as f64 } else { kk as f64 - n as f64 };
                    let w = 2.0 * PI * k / length;
                    s += -w * w * (2.0 * PI * k * ((i as f64 - j as f64) * h) / length).cos();
                }
                *e = s / n as f64;
            }
        }
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = -dt * d2[i][j];
            }
            a[i][i] += 1.0 - dt / (eps * eps);
            a[i][n] = u[i] - dt * u[i].powi(3) / (eps * eps);
        }
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=n {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn sbdf1_matches_dense_oracle() {
        let g = GridSpec::new_1d(32, 1.0).unwrap();
        let mut rng = SplitMix64::new(21);
        let u = RealGridField::new(g, (0..32).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
        let dt = 1e-3;
        let m = PdeModel::allen_cahn(0.1);
        let got = inverse_transform(&sbdf1_step(&m, &forward_transform(&u).unwrap(), dt).unwrap()).unwrap();
        let want = dense_ac_sbdf1(u.values(), 0.1, 1.0, dt);
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn singular_denominator_reported() {
        // AC mode 0 has L = -1/eps^2; dt = eps^2 zeroes 1 + dt L.
        let g = GridSpec::new_1d(8, 1.0).unwrap();
        let u = forward_transform(&RealGridField::constant(g, 0.5)).unwrap();
        let m = PdeModel::allen_cahn(0.5);
        assert!(matches!(
            sbdf1_step(&m, &u, 0.25),
            Err(Error::StepperSingular { mode: 0 })
        ));
    }

    #[test]
    fn allen_cahn_equilibrium_is_preserved() {
        let g = GridSpec::new_1d(64, 1.0).unwrap();
        let cfg = SolverConfig {
            n_snapshots: 10,
            ..SolverConfig::default()
        };
        let t = simulate_pde(&PdeModel::allen_cahn(0.1), &RealGridField::constant(g, 1.0), &cfg).unwrap();
        assert_eq!(t.len(), 10);
        for s in t.snapshots() {
            assert!(s.values().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let g = GridSpec::new_1d(16, 1.0).unwrap();
        let ic = RealGridField::constant(g, 50.0);
        let cfg = SolverConfig {
            dt_record: 0.1,
            substeps: 1,
            n_snapshots: 10,
            stepper: Stepper::Sbdf1,
        };
        assert!(matches!(
            simulate_pde(&PdeModel::allen_cahn(0.1), &ic, &cfg),
            Err(Error::BlowUp { .. })
        ));
    }

    fn soliton(c: f64, x0: f64, length: f64) -> impl Fn(f64, f64) -> f64 {
        move |x, t| {
            // Nearest periodic image of the travelling coordinate.
            let mut z = (x - c * t - x0).rem_euclid(length);
            if z > length / 2.0 {
                z -= length;
            }
            0.5 * c * sech2(0.5 * c.sqrt() * z)
        }
    }

    #[test]
    fn kdv_mass_is_conserved() {
        let g = GridSpec::new_1d(128, 20.0).unwrap();
        let f = soliton(16.0, 10.0, 20.0);
        let ic = RealGridField::from_fn(g, |x| f(x[0], 0.0)).unwrap();
        let cfg = SolverConfig {
            dt_record: 1e-3,
            substeps: 10,
            n_snapshots: 20,
            stepper: Stepper::Sbdf2,
        };
        let t = simulate_pde(&PdeModel::kdv(), &ic, &cfg).unwrap();
        let m0 = ic.integrate();
        for s in t.snapshots() {
            assert!((s.integrate() - m0).abs() < 1e-10 * m0.abs().max(1.0));
        }
    }
}
