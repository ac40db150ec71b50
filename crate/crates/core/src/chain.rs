//! Periodic FPUT and FENE chains in strain variables `r_n = q_{n+1} - q_n`,
//! and the long-wave map between chain strains and a macroscopic field:
//!
//! `r_n(t) = eps^2 u(xi, tau)`, `xi = eps (n - c t)`, `tau = eps^3 t`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::pde::SolverConfig;
use crate::spectral::{forward_transform, spectral_derivative, GridSpec, RealGridField, SpectralField};

/// Recorded steps are resolved by this many velocity-Verlet steps by default.
pub const DEFAULT_MICRO_SUBSTEPS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForceLaw {
    /// `F(r) = c^2 r + alpha r^2`.
    Fput { c: f64, alpha: f64 },
    /// `F(r) = H r / (1 - (r/R)^2)`, defined for `|r| < R`.
    Fene { h: f64, r_max: f64 },
}

impl ForceLaw {
    pub fn fput_default() -> Self {
        ForceLaw::Fput { c: 1.0, alpha: 1.0 }
    }

    /// `H = 1`, `R = 50 eps^2`.
    pub fn fene_default(epsilon: f64) -> Self {
        ForceLaw::Fene {
            h: 1.0,
            r_max: 50.0 * epsilon * epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ForceLaw::Fput { c, alpha } if !(c.is_finite() && alpha.is_finite() && c >= 0.0) => {
                Err(Error::Config(format!("invalid FPUT parameters c={c}, alpha={alpha}")))
            }
            ForceLaw::Fene { h, r_max } if !(h > 0.0 && r_max > 0.0) => Err(Error::Config(
                format!("FENE parameters must be positive, got H={h}, R={r_max}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ForceLaw::Fput { .. } => "fput",
            ForceLaw::Fene { .. } => "fene",
        }
    }

    fn meta(&self, meta: &mut BTreeMap<String, String>) {
        match *self {
            ForceLaw::Fput { c, alpha } => {
                meta.insert("c".into(), c.to_string());
                meta.insert("alpha".into(), alpha.to_string());
            }
            ForceLaw::Fene { h, r_max } => {
                meta.insert("H".into(), h.to_string());
                meta.insert("R".into(), r_max.to_string());
            }
        }
    }

    /// Bond potential `V` with `V' = F`, `V(0) = 0`.
    pub fn potential(&self, r: f64) -> Result<f64> {
        match *self {
            ForceLaw::Fput { c, alpha } => Ok(0.5 * c * c * r * r + alpha * r * r * r / 3.0),
            ForceLaw::Fene { h, r_max } => {
                check_extension(r, r_max, 0, 0)?;
                let x = r / r_max;
                Ok(-0.5 * h * r_max * r_max * (-x * x).ln_1p())
            }
        }
    }
}

fn check_extension(r: f64, r_max: f64, node: usize, step: usize) -> Result<()> {
    if r.abs() >= r_max || r.is_nan() {
        return Err(Error::ExtensionLimit {
            node,
            strain: r,
            limit: r_max,
            step,
        });
    }
    Ok(())
}

pub fn force(law: &ForceLaw, r: f64) -> Result<f64> {
    match *law {
        ForceLaw::Fput { c, alpha } => Ok(c * c * r + alpha * r * r),
        ForceLaw::Fene { h, r_max } => {
            check_extension(r, r_max, 0, 0)?;
            let x = r / r_max;
            Ok(h * r / (1.0 - x * x))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingParams {
    pub epsilon: f64,
    pub c_wave: f64,
}

impl ScalingParams {
    pub fn new(epsilon: f64, c_wave: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1), got {epsilon}"
            )));
        }
        if !c_wave.is_finite() {
            return Err(Error::Config("c_wave must be finite".into()));
        }
        Ok(Self { epsilon, c_wave })
    }

    pub fn fput_default() -> Self {
        Self {
            epsilon: 0.05,
            c_wave: 1.0,
        }
    }

    pub fn fene_default() -> Self {
        Self {
            epsilon: 0.03,
            c_wave: 1.0,
        }
    }

    /// `ceil(L / eps)` nodes cover the macroscopic period once.
    pub fn node_count(&self, length: f64) -> usize {
        (length / self.epsilon - 1e-9).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub r: Vec<f64>,
    pub rdot: Vec<f64>,
    pub t_micro: f64,
}

impl ChainState {
    pub fn new(r: Vec<f64>, rdot: Vec<f64>, t_micro: f64) -> Result<Self> {
        if r.len() != rdot.len() {
            return Err(Error::Shape(format!(
                "strain and strain-rate lengths differ ({} vs {})",
                r.len(),
                rdot.len()
            )));
        }
        if r.len() < 8 {
            return Err(Error::Config(format!(
                "a chain needs at least 8 nodes, got {}",
                r.len()
            )));
        }
        Ok(Self { r, rdot, t_micro })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

fn forces_into(law: &ForceLaw, r: &[f64], out: &mut [f64], step: usize) -> Result<()> {
    match *law {
        ForceLaw::Fput { c, alpha } => {
            let c2 = c * c;
            for (o, &x) in out.iter_mut().zip(r) {
                *o = c2 * x + alpha * x * x;
            }
        }
        ForceLaw::Fene { h, r_max } => {
            for (n, (o, &x)) in out.iter_mut().zip(r).enumerate() {
                check_extension(x, r_max, n, step)?;
                let y = x / r_max;
                *o = h * x / (1.0 - y * y);
            }
        }
    }
    Ok(())
}

fn laplacian_into(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    for i in 0..n {
        let prev = f[(i + n - 1) % n];
        let next = f[(i + 1) % n];
        out[i] = next - 2.0 * f[i] + prev;
    }
}

/// `rddot_n = F(r_{n+1}) - 2 F(r_n) + F(r_{n-1})`, periodic.
pub fn strain_acceleration(law: &ForceLaw, r: &[f64]) -> Result<Vec<f64>> {
    let mut f = vec![0.0; r.len()];
    forces_into(law, r, &mut f, 0)?;
    let mut out = vec![0.0; r.len()];
    laplacian_into(&f, &mut out);
    Ok(out)
}

struct Workspace {
    f: Vec<f64>,
    acc: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            f: vec![0.0; n],
            acc: vec![0.0; n],
        }
    }

    fn accel(&mut self, law: &ForceLaw, r: &[f64], step: usize) -> Result<()> {
        forces_into(law, r, &mut self.f, step)?;
        laplacian_into(&self.f, &mut self.acc);
        Ok(())
    }
}

/// Advances `state` in place; `ws.acc` must hold the acceleration at `state.r`
/// on entry and holds the new one on exit.
fn verlet_in_place(
    law: &ForceLaw,
    state: &mut ChainState,
    dt: f64,
    ws: &mut Workspace,
    step: usize,
) -> Result<()> {
    let half = 0.5 * dt;
    for (v, a) in state.rdot.iter_mut().zip(&ws.acc) {
        *v += half * a;
    }
    for (r, v) in state.r.iter_mut().zip(&state.rdot) {
        *r += dt * v;
    }
    ws.accel(law, &state.r, step)?;
    for (v, a) in state.rdot.iter_mut().zip(&ws.acc) {
        *v += half * a;
    }
    state.t_micro += dt;
    Ok(())
}

/// One velocity-Verlet step: half kick, drift, half kick with the new acceleration.
pub fn verlet_step(law: &ForceLaw, state: &ChainState, dt_micro: f64) -> Result<ChainState> {
    if !(dt_micro > 0.0) {
        return Err(Error::Config(format!("dt_micro must be positive, got {dt_micro}")));
    }
    let mut ws = Workspace::new(state.len());
    ws.accel(law, &state.r, 0)?;
    let mut next = state.clone();
    verlet_in_place(law, &mut next, dt_micro, &mut ws, 1)?;
    Ok(next)
}

/// Chain Hamiltonian `sum 1/2 v_n^2 + V(r_n)`.
///
/// Node velocities are recovered from `rdot_n = v_{n+1} - v_n` by cumulative
/// summation and shifted to zero mean; momentum is conserved, so this drops a
/// constant from `H`.
pub fn chain_energy(law: &ForceLaw, state: &ChainState) -> Result<f64> {
    let n = state.len();
    let mut v = vec![0.0; n];
    for i in 1..n {
        v[i] = v[i - 1] + state.rdot[i - 1];
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let kinetic: f64 = v.iter().map(|x| 0.5 * (x - mean) * (x - mean)).sum();
    let mut potential = 0.0;
    for &r in &state.r {
        potential += law.potential(r)?;
    }
    Ok(kinetic + potential)
}

/// Evaluates the trigonometric interpolant of a 1D spectrum at `x`.
fn trig_eval(spec: &SpectralField, x: f64) -> f64 {
    let n = spec.grid().points()[0];
    let l = spec.grid().lengths()[0];
    let c = spec.coeffs();
    let th = 2.0 * PI * x / l;
    let mut s = c[0].re + c[n / 2].re * (th * (n / 2) as f64).cos();
    for (k, ck) in c.iter().enumerate().take(n / 2).skip(1) {
        let (sn, cs) = (th * k as f64).sin_cos();
        s += 2.0 * (ck.re * cs - ck.im * sn);
    }
    s
}

/// Initial strains `r_n = eps^2 u(eps n)` and rates `rdot_n = -c eps^3 u_x(eps n)`,
/// with both profiles evaluated through their trigonometric interpolants.
pub fn chain_from_profile(
    u0: &RealGridField,
    du0dx: &RealGridField,
    law: &ForceLaw,
    scaling: &ScalingParams,
    n_nodes: usize,
) -> Result<ChainState> {
    if u0.grid().dim() != 1 || du0dx.grid() != u0.grid() {
        return Err(Error::InvalidGrid(
            "chain profiles must be 1D fields on one grid".into(),
        ));
    }
    let l = u0.grid().lengths()[0];
    let eps = scaling.epsilon;
    let su = forward_transform(u0)?;
    let sd = forward_transform(du0dx)?;
    let mut r = Vec::with_capacity(n_nodes);
    let mut rdot = Vec::with_capacity(n_nodes);
    for n in 0..n_nodes {
        let xi = (eps * n as f64).rem_euclid(l);
        r.push(eps * eps * trig_eval(&su, xi));
        rdot.push(-scaling.c_wave * eps.powi(3) * trig_eval(&sd, xi));
    }
    if let ForceLaw::Fene { r_max, .. } = *law {
        for (n, &x) in r.iter().enumerate() {
            check_extension(x, r_max, n, 0)?;
        }
    }
    ChainState::new(r, rdot, 0.0)
}

/// [`chain_from_profile`] with `u_x` taken spectrally from `u0`.
pub fn chain_from_field(
    u0: &RealGridField,
    law: &ForceLaw,
    scaling: &ScalingParams,
    n_nodes: usize,
) -> Result<ChainState> {
    let d = spectral_derivative(&forward_transform(u0)?, 1, 0)?;
    let du = crate::spectral::inverse_transform(&d)?;
    chain_from_profile(u0, &du, law, scaling, n_nodes)
}

/// Linear periodic interpolation of `(xi_n, eps^-2 r_n)`, with
/// `xi_n = eps (n - c t) mod L`, onto the uniform grid.
pub fn reconstruct_macro(
    state: &ChainState,
    scaling: &ScalingParams,
    grid: &GridSpec,
) -> Result<RealGridField> {
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid("reconstruction targets 1D grids".into()));
    }
    let l = grid.lengths()[0];
    let eps = scaling.epsilon;
    let inv = 1.0 / (eps * eps);
    let shift = scaling.c_wave * state.t_micro;
    let mut pts: Vec<(f64, f64)> = state
        .r
        .iter()
        .enumerate()
        .map(|(n, &r)| {
            let mut xi = (eps * (n as f64 - shift)).rem_euclid(l);
            if xi >= l {
                xi = 0.0;
            }
            (xi, r * inv)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    if pts.len() < 2 {
        return Err(Error::InterpolationGap(format!(
            "{} distinct node positions cannot cover the domain",
            pts.len()
        )));
    }
    let m = pts.len();
    let values = grid
        .axis_coords(0)
        .into_iter()
        .map(|x| {
            let idx = pts.partition_point(|p| p.0 <= x);
            let (x0, y0) = if idx == 0 {
                (pts[m - 1].0 - l, pts[m - 1].1)
            } else {
                pts[idx - 1]
            };
            let (x1, y1) = if idx == m {
                (pts[0].0 + l, pts[0].1)
            } else {
                pts[idx]
            };
            let w = (x - x0) / (x1 - x0);
            y0 + w * (y1 - y0)
        })
        .collect();
    RealGridField::new(grid.clone(), values)
}

/// Runs the chain from the macroscopic profile `u0` and records reconstructed
/// fields every `cfg.dt_record` of slow time. Each record interval is resolved
/// by `cfg.substeps` Verlet steps of `dt_micro = dt_record / (eps^3 substeps)`.
pub fn simulate_chain(
    law: &ForceLaw,
    scaling: &ScalingParams,
    u0: &RealGridField,
    cfg: &SolverConfig,
    n_nodes: usize,
) -> Result<Trajectory> {
    law.validate()?;
    cfg.validate()?;
    let grid = u0.grid().clone();
    let eps = scaling.epsilon;
    let dt_micro = cfg.dt_record / (eps.powi(3) * cfg.substeps as f64);
    let mut state = chain_from_field(u0, law, scaling, n_nodes)?;
    let mut ws = Workspace::new(n_nodes);
    ws.accel(law, &state.r, 0)?;
    let mut snapshots = Vec::with_capacity(cfg.n_snapshots);
    snapshots.push(reconstruct_macro(&state, scaling, &grid)?);
    let mut step = 0;
    for _ in 1..cfg.n_snapshots {
        for _ in 0..cfg.substeps {
            step += 1;
            verlet_in_place(law, &mut state, dt_micro, &mut ws, step)?;
        }
        if state.r.iter().chain(&state.rdot).any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step });
        }
        snapshots.push(reconstruct_macro(&state, scaling, &grid)?);
    }
    let mut meta = BTreeMap::new();
    meta.insert("model".into(), law.name().into());
    law.meta(&mut meta);
    meta.insert("epsilon".into(), eps.to_string());
    meta.insert("c_wave".into(), scaling.c_wave.to_string());
    meta.insert("substeps".into(), cfg.substeps.to_string());
    meta.insert("n_nodes".into(), n_nodes.to_string());
    Trajectory::new(snapshots, cfg.dt_record, meta)
}
