//! Spectral Onsager model on 1D periodic fields.
//!
//! State is the packed half-spectrum `u_hat` (`B x 2H`, see [`crate::autodiff::fft`]).
//! One explicit step is
//!
//! ```text
//! u_hat+ = u_hat - dt (M + W) mu_hat
//! M = Re(G)^2,  W = i Im(G)        (G = G_psi(trunc u_hat), one complex value per mode k >= 0)
//! mu_hat = (alpha + beta kappa^2) u_hat + rfft(F'(u)) + conj grad v(trunc u_hat)
//! ```
//!
//! with `alpha = softplus(raw_alpha)`, `beta = softplus(raw_beta)`,
//! `kappa = 2 pi k / L`, and `trunc` keeping modes `0..=cutoff` split into real
//! and imaginary parts. Negative modes are never stored: they follow by
//! Hermitian symmetry, which makes `M` even and `W` odd by construction.
//! `Im W` is masked to 0 at `k = 0` and at the Nyquist mode. [`Structure`]
//! can additionally switch off `W` (purely dissipative) or `M` (conservative).
//!
//! The learned potential is
//!
//! ```text
//! V0 = h sum_j (alpha/2 u_j^2 + F(u_j))
//! V1 = beta/2 * L * sum_k w_k kappa_k^2 |u_hat_k|^2      (w = 1 at k = 0, N/2; 2 otherwise)
//! V2 = v(trunc u_hat)
//! ```
//!
//! and `mu` is its L2 functional derivative. For `0 < k <= cutoff` the `v`
//! contribution to `mu_hat_k` is `(1/(2L)) (dv/da_k + i dv/db_k)`; at `k = 0` it
//! is `(1/L) dv/da_0` because mode 0 has no conjugate partner.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;

use crate::autodiff::{mlp_forward, mlp_init, Activation, Mat, MlpSpec, Tape, Var};
use crate::checksum::crc64;
use crate::dataset::parse_header_fields;
use crate::error::{Error, Result};
use crate::pde::{free_energy, PdeKind, PdeModel};
use crate::rng::SplitMix64;
use crate::spectral::{forward_transform, inverse_unchecked, GridSpec, RealGridField, SpectralField};

pub const CKPT_MAGIC: &str = "OMCKPT1";

/// Where `mu` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialMode {
    /// `F`, `v`, `alpha`, `beta` are trained.
    Learned,
    /// `mu` is the exact functional derivative of a reference free energy;
    /// only the multiplier network matters.
    Known(PdeModel),
}

/// Which multiplier family is active. The masked part of `G` is multiplied by
/// an exact zero, so the constraint holds for any parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    General,
    /// `W = 0`: `V` can only decrease for small enough `dt`.
    Dissipative,
    /// `M = 0`: the continuous-time flow conserves `V`.
    Conservative,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::General => "general",
            Structure::Dissipative => "dissipative",
            Structure::Conservative => "conservative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "general" => Structure::General,
            "dissipative" => Structure::Dissipative,
            "conservative" => Structure::Conservative,
            _ => return Err(Error::Config(format!("unknown structure `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_points: usize,
    pub length: f64,
    pub cutoff: usize,
    pub width: usize,
    pub depth: usize,
    pub hidden: Activation,
    pub potential: PotentialMode,
    pub structure: Structure,
}

impl ModelConfig {
    pub fn new(n_points: usize, length: f64) -> Self {
        Self {
            n_points,
            length,
            cutoff: 16,
            width: 64,
            depth: 3,
            hidden: Activation::Silu,
            potential: PotentialMode::Learned,
            structure: Structure::General,
        }
    }

    pub fn validate(&self) -> Result<()> {
        GridSpec::new_1d(self.n_points, self.length)?;
        if self.cutoff == 0 || self.cutoff >= self.n_points / 2 {
            return Err(Error::ModeRangeError {
                cutoff: self.cutoff,
                available: self.n_points / 2 - 1,
            });
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("network width and depth must be positive".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.n_points / 2 + 1
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new_1d(self.n_points, self.length).expect("validated")
    }

    /// Real inputs seen by `G` and `v`: re and im of modes `0..=cutoff`.
    pub fn n_features(&self) -> usize {
        2 * (self.cutoff + 1)
    }

    fn spec(&self, inputs: usize, outputs: usize) -> MlpSpec {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat(self.width).take(self.depth));
        widths.push(outputs);
        MlpSpec::new(widths, self.hidden, Activation::Sine).expect("validated widths")
    }

    pub fn psi_spec(&self) -> MlpSpec {
        self.spec(self.n_features(), 2 * self.half())
    }

    pub fn f_spec(&self) -> MlpSpec {
        self.spec(1, 1)
    }

    pub fn v_spec(&self) -> MlpSpec {
        self.spec(self.n_features(), 1)
    }
}

/// All trainable quantities. Flat layout (checkpoints, optimiser):
/// `psi`, then `phi_f`, then `phi_v` (each `[W_1, b_1, ...]` row-major), then
/// `raw_alpha`, `raw_beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub psi: Vec<Mat>,
    pub phi_f: Vec<Mat>,
    pub phi_v: Vec<Mat>,
    pub raw_alpha: f64,
    pub raw_beta: f64,
}

impl ModelParameters {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut psi = mlp_init(&config.psi_spec(), rng.next_u64());
        // W starts at exactly zero. Explicit Euler amplifies every skew mode
        // by sqrt(1 + (dt W lambda)^2), and modes the data never excites
        // receive no gradient to undo a random start.
        let h = config.half();
        let w_out = psi.iter_mut().rev().nth(1).expect("output layer");
        for r in 0..w_out.rows {
            for c in h..2 * h {
                w_out.set(r, c, 0.0);
            }
        }
        let phi_f = mlp_init(&config.f_spec(), rng.next_u64());
        let phi_v = mlp_init(&config.v_spec(), rng.next_u64());
        Ok(Self {
            config,
            init_seed: seed,
            psi,
            phi_f,
            phi_v,
            raw_alpha: 0.0,
            raw_beta: 0.0,
        })
    }

    pub fn alpha(&self) -> f64 {
        crate::autodiff::softplus(self.raw_alpha)
    }

    pub fn beta(&self) -> f64 {
        crate::autodiff::softplus(self.raw_beta)
    }

    fn tensors(&self) -> impl Iterator<Item = &Mat> {
        self.psi.iter().chain(&self.phi_f).chain(&self.phi_v)
    }

    pub fn n_params(&self) -> usize {
        self.tensors().map(|m| m.len()).sum::<usize>() + 2
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for m in self.tensors() {
            out.extend_from_slice(&m.data);
        }
        out.push(self.raw_alpha);
        out.push(self.raw_beta);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for m in self
            .psi
            .iter_mut()
            .chain(self.phi_f.iter_mut())
            .chain(self.phi_v.iter_mut())
        {
            let n = m.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.raw_alpha = flat[off];
        self.raw_beta = flat[off + 1];
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            psi: self.psi.iter().map(|m| tape.var(m.clone())).collect(),
            phi_f: self.phi_f.iter().map(|m| tape.var(m.clone())).collect(),
            phi_v: self.phi_v.iter().map(|m| tape.var(m.clone())).collect(),
            raw_alpha: tape.scalar(self.raw_alpha),
            raw_beta: tape.scalar(self.raw_beta),
        }
    }

    /// Flattens per-variable gradients in the [`ModelParameters::flatten`] order.
    pub fn flatten_grads(grads: &[Var<'_>]) -> Vec<f64> {
        let mut out = Vec::new();
        for g in grads {
            out.extend_from_slice(&g.value().data);
        }
        out
    }
}

pub struct ParamVars<'t> {
    pub psi: Vec<Var<'t>>,
    pub phi_f: Vec<Var<'t>>,
    pub phi_v: Vec<Var<'t>>,
    pub raw_alpha: Var<'t>,
    pub raw_beta: Var<'t>,
}

impl<'t> ParamVars<'t> {
    /// In flat order.
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut v: Vec<Var<'t>> = self
            .psi
            .iter()
            .chain(&self.phi_f)
            .chain(&self.phi_v)
            .copied()
            .collect();
        v.push(self.raw_alpha);
        v.push(self.raw_beta);
        v
    }
}

/// Per-mode weights for `V1` and the `v` gradient, plus the `W` mask.
struct Consts {
    kk_row: Mat,
    ones_row: Mat,
    parseval_row: Mat,
    m_mask: Mat,
    w_mask: Mat,
    v_weight: Mat,
    known_linear: Option<Mat>,
}

impl Consts {
    fn new(cfg: &ModelConfig) -> Self {
        let n = cfg.n_points;
        let h = cfg.half();
        let l = cfg.length;
        let kappa2: Vec<f64> = (0..h).map(|k| (2.0 * PI * k as f64 / l).powi(2)).collect();
        let twice = |v: &[f64]| -> Mat { Mat::row(v.iter().chain(v).copied().collect()) };
        let edge = |k: usize| k == 0 || k == n / 2;
        let w: Vec<f64> = (0..h).map(|k| if edge(k) { 1.0 } else { 2.0 }).collect();
        let parseval: Vec<f64> = w.iter().zip(&kappa2).map(|(w, k)| w * k).collect();
        let c = cfg.cutoff;
        let mut v_weight = vec![0.0; 2 * (c + 1)];
        for k in 0..=c {
            v_weight[k] = if k == 0 { 1.0 / l } else { 0.5 / l };
            v_weight[c + 1 + k] = if k == 0 { 0.0 } else { 0.5 / l };
        }
        let known_linear = match &cfg.potential {
            PotentialMode::Learned => None,
            PotentialMode::Known(model) => Some(twice(
                &kappa2
                    .iter()
                    .map(|&ks| match model.kind {
                        PdeKind::AllenCahn => ks - 1.0 / (model.ac_epsilon * model.ac_epsilon),
                        PdeKind::Kdv => model.kdv_b * ks,
                    })
                    .collect::<Vec<_>>(),
            )),
        };
        Self {
            kk_row: twice(&kappa2),
            ones_row: Mat::filled(1, 2 * h, 1.0),
            parseval_row: twice(&parseval),
            m_mask: Mat::filled(1, h, if cfg.structure == Structure::Conservative { 0.0 } else { 1.0 }),
            w_mask: Mat::row(
                (0..h)
                    .map(|k| if edge(k) || cfg.structure == Structure::Dissipative { 0.0 } else { 1.0 })
                    .collect(),
            ),
            v_weight: Mat::row(v_weight),
            known_linear,
        }
    }
}

/// Model evaluation on one tape.
pub struct Graph<'t, 'p> {
    pub tape: &'t Tape,
    pub params: &'p ModelParameters,
    pub vars: ParamVars<'t>,
    consts: Consts,
}

/// Learned-potential components, each `B x 1`.
pub struct PotentialVars<'t> {
    pub v0: Var<'t>,
    pub v1: Var<'t>,
    pub v2: Var<'t>,
}

impl<'t, 'p> Graph<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ModelParameters) -> Self {
        Self {
            tape,
            params,
            vars: params.on_tape(tape),
            consts: Consts::new(&params.config),
        }
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.config
    }

    fn konst(&self, m: &Mat) -> Var<'t> {
        self.tape.var(m.clone())
    }

    /// Re and im of modes `0..=cutoff`, `B x 2(cutoff+1)`.
    pub fn features(&self, u_hat: Var<'t>) -> Var<'t> {
        let c = self.cfg().cutoff + 1;
        let h = self.cfg().half();
        self.tape
            .concat_cols(&[u_hat.slice_cols(0, c), u_hat.slice_cols(h, c)])
    }

    /// `(M, Im W)`, each `B x H`.
    pub fn multipliers(&self, u_hat: Var<'t>) -> (Var<'t>, Var<'t>) {
        let h = self.cfg().half();
        let g = mlp_forward(&self.cfg().psi_spec(), &self.vars.psi, self.features(u_hat));
        let gr = g.slice_cols(0, h);
        let gi = g.slice_cols(h, h);
        let m = (gr * gr).mul_row(self.konst(&self.consts.m_mask));
        (m, gi.mul_row(self.konst(&self.consts.w_mask)))
    }

    pub fn alpha(&self) -> Var<'t> {
        self.vars.raw_alpha.softplus()
    }

    pub fn beta(&self) -> Var<'t> {
        self.vars.raw_beta.softplus()
    }

    /// `F'(u)` pointwise, `B x N`.
    pub fn f_prime(&self, u: Var<'t>) -> Result<Var<'t>> {
        let (b, n) = u.shape();
        let flat = u.reshape(b * n, 1);
        let f = mlp_forward(&self.cfg().f_spec(), &self.vars.phi_f, flat);
        let g = self.tape.gradient(f.sum(), &[flat])?;
        Ok(g[0].reshape(b, n))
    }

    /// `conj grad v` placed in the half-spectrum layout, for a given `v(z)` (`B x 1`).
    pub fn v_contribution(&self, z: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let c = self.cfg().cutoff + 1;
        let h = self.cfg().half();
        let gz = self.tape.gradient(v.sum(), &[z])?[0];
        let w = gz.mul_row(self.konst(&self.consts.v_weight));
        Ok(w.slice_cols(0, c).pad_cols(0, 2 * h) + w.slice_cols(c, c).pad_cols(h, 2 * h))
    }

    pub fn mu_hat(&self, u_hat: Var<'t>) -> Result<Var<'t>> {
        let u = u_hat.irfft();
        if let PotentialMode::Known(model) = &self.cfg().potential {
            let lin = u_hat.mul_row(self.konst(self.consts.known_linear.as_ref().expect("known")));
            let nl = match model.kind {
                PdeKind::AllenCahn => {
                    (u * u * u).scale(1.0 / (model.ac_epsilon * model.ac_epsilon))
                }
                PdeKind::Kdv => (u * u).scale(-0.5 * model.kdv_a),
            };
            return Ok(lin + nl.rfft());
        }
        let row = self.konst(&self.consts.ones_row).mul_scalar(self.alpha())
            + self.konst(&self.consts.kk_row).mul_scalar(self.beta());
        let lin = u_hat.mul_row(row);
        let fpart = self.f_prime(u)?.rfft();
        let z = self.features(u_hat);
        let v = mlp_forward(&self.cfg().v_spec(), &self.vars.phi_v, z);
        Ok(lin + fpart + self.v_contribution(z, v)?)
    }

    /// One explicit Euler step of size `dt`.
    pub fn step(&self, u_hat: Var<'t>, dt: f64) -> Result<Var<'t>> {
        let h = self.cfg().half();
        let (m, w) = self.multipliers(u_hat);
        let mu = self.mu_hat(u_hat)?;
        let (mr, mi) = (mu.slice_cols(0, h), mu.slice_cols(h, h));
        let re = m * mr - w * mi;
        let im = m * mi + w * mr;
        Ok(u_hat - self.tape.concat_cols(&[re, im]).scale(dt))
    }

    pub fn potential(&self, u_hat: Var<'t>) -> PotentialVars<'t> {
        let cfg = self.cfg();
        let (b, n) = (u_hat.shape().0, cfg.n_points);
        let hcell = cfg.length / n as f64;
        let u = u_hat.irfft();
        let quad = (u * u).sum_cols().mul_scalar(self.alpha()).scale(0.5 * hcell);
        let f = mlp_forward(&cfg.f_spec(), &self.vars.phi_f, u.reshape(b * n, 1))
            .reshape(b, n)
            .sum_cols()
            .scale(hcell);
        let v1 = (u_hat * u_hat)
            .mul_row(self.konst(&self.consts.parseval_row))
            .sum_cols()
            .mul_scalar(self.beta())
            .scale(0.5 * cfg.length);
        let v2 = mlp_forward(&cfg.v_spec(), &self.vars.phi_v, self.features(u_hat));
        PotentialVars {
            v0: quad + f,
            v1,
            v2,
        }
    }
}

/// Packs spectra into `B x 2H` rows.
pub fn pack_half(specs: &[&SpectralField]) -> Mat {
    let n = specs[0].grid().points()[0];
    let h = n / 2 + 1;
    let mut out = Mat::zeros(specs.len(), 2 * h);
    for (r, s) in specs.iter().enumerate() {
        for k in 0..h {
            let c = s.coeffs()[k];
            out.set(r, k, c.re);
            out.set(r, h + k, c.im);
        }
        out.set(r, h, 0.0);
        out.set(r, 2 * h - 1, 0.0);
    }
    out
}

/// Row `r` of a packed half-spectrum as a full Hermitian spectrum.
pub fn unpack_half(m: &Mat, r: usize, grid: &GridSpec) -> SpectralField {
    let n = grid.points()[0];
    let h = n / 2 + 1;
    let mut s = SpectralField::zeros(grid.clone());
    for k in 0..h {
        let im = if k == 0 || k == n / 2 { 0.0 } else { m.at(r, h + k) };
        let c = Complex64::new(m.at(r, k), im);
        s.set_coeff([k as i64, 0], c);
        s.set_coeff([-(k as i64), 0], c.conj());
    }
    s
}

fn check_grid(params: &ModelParameters, grid: &GridSpec) -> Result<()> {
    let cfg = &params.config;
    if grid.dim() != 1 || grid.points()[0] != cfg.n_points || grid.lengths()[0] != cfg.length {
        return Err(Error::InvalidGrid(format!(
            "model expects a 1D grid of {} points on length {}",
            cfg.n_points, cfg.length
        )));
    }
    Ok(())
}

/// Per-mode multipliers in standard DFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSet {
    pub m: Vec<Complex64>,
    pub w: Vec<Complex64>,
}

/// Mirrors `k >= 0` values onto negative modes (`even` for M, odd for Im W).
fn mirror(half: &[f64], n: usize, even: bool) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i <= n / 2 {
                half[i]
            } else if even {
                half[n - i]
            } else {
                -half[n - i]
            }
        })
        .collect()
}

pub fn multiplier_eval(params: &ModelParameters, u_hat: &SpectralField) -> Result<MultiplierSet> {
    check_grid(params, u_hat.grid())?;
    let tape = Tape::new();
    let g = Graph::new(&tape, params);
    let (m, w) = g.multipliers(tape.var(pack_half(&[u_hat])));
    tape.check()?;
    let n = params.config.n_points;
    Ok(MultiplierSet {
        m: mirror(&m.value().data, n, true)
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect(),
        w: mirror(&w.value().data, n, false)
            .into_iter()
            .map(|v| Complex64::new(0.0, v))
            .collect(),
    })
}

pub fn mu_hat_eval(params: &ModelParameters, u: &RealGridField) -> Result<SpectralField> {
    check_grid(params, u.grid())?;
    let tape = Tape::new();
    let g = Graph::new(&tape, params);
    let mu = g.mu_hat(tape.var(pack_half(&[&forward_transform(u)?])))?;
    tape.check()?;
    Ok(unpack_half(&mu.value(), 0, u.grid()))
}

/// Steps a batch of packed states; each row is one state.
pub fn step_packed(params: &ModelParameters, u_hat: &Mat, dt: f64) -> Result<Mat> {
    let tape = Tape::new();
    let g = Graph::new(&tape, params);
    let next = g.step(tape.var(u_hat.clone()), dt)?;
    let v = next.value();
    if !v.all_finite() {
        return Err(Error::BlowUp { step: 1 });
    }
    Ok((*v).clone())
}

pub fn euler_spectral_step(
    params: &ModelParameters,
    u_hat: &SpectralField,
    dt: f64,
) -> Result<SpectralField> {
    if !(dt >= 0.0) {
        return Err(Error::Config(format!("dt must be non-negative, got {dt}")));
    }
    check_grid(params, u_hat.grid())?;
    let next = step_packed(params, &pack_half(&[u_hat]), dt)?;
    Ok(unpack_half(&next, 0, u_hat.grid()))
}

/// `n_steps + 1` physical snapshots starting at `u0`.
pub fn rollout(
    params: &ModelParameters,
    u0: &RealGridField,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<RealGridField>> {
    let mut out = rollout_batch(params, std::slice::from_ref(u0), dt, n_steps)?;
    Ok(out.pop().expect("one rollout"))
}

/// Rolls several initial states forward together; `BlowUp` names the first bad step.
pub fn rollout_batch(
    params: &ModelParameters,
    u0: &[RealGridField],
    dt: f64,
    n_steps: usize,
) -> Result<Vec<Vec<RealGridField>>> {
    if u0.is_empty() {
        return Ok(vec![]);
    }
    let grid = u0[0].grid().clone();
    for u in u0 {
        check_grid(params, u.grid())?;
    }
    let specs = u0.iter().map(forward_transform).collect::<Result<Vec<_>>>()?;
    let mut state = pack_half(&specs.iter().collect::<Vec<_>>());
    let mut out: Vec<Vec<RealGridField>> = u0.iter().map(|u| vec![u.clone()]).collect();
    for step in 1..=n_steps {
        state = step_packed(params, &state, dt).map_err(|e| match e {
            Error::BlowUp { .. } | Error::NumericOverflow { .. } => Error::BlowUp { step },
            other => other,
        })?;
        for (r, traj) in out.iter_mut().enumerate() {
            traj.push(inverse_unchecked(&unpack_half(&state, r, &grid)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialParts {
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
}

impl PotentialParts {
    pub fn total(&self) -> f64 {
        self.v0 + self.v1 + self.v2
    }
}

/// `V0, V1, V2` for each state (analytic split in known-potential mode: local
/// part, gradient part, 0).
pub fn learned_potential_batch(
    params: &ModelParameters,
    states: &[&RealGridField],
) -> Result<Vec<PotentialParts>> {
    for u in states {
        check_grid(params, u.grid())?;
    }
    if let PotentialMode::Known(model) = &params.config.potential {
        return states
            .iter()
            .map(|u| {
                let total = free_energy(model, u);
                let local = model_local_energy(model, u);
                Ok(PotentialParts {
                    v0: local,
                    v1: total - local,
                    v2: 0.0,
                })
            })
            .collect();
    }
    if states.is_empty() {
        return Ok(vec![]);
    }
    let specs = states.iter().map(|u| forward_transform(u)).collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let g = Graph::new(&tape, params);
    let p = g.potential(tape.var(pack_half(&specs.iter().collect::<Vec<_>>())));
    tape.check()?;
    let (v0, v1, v2) = (p.v0.value(), p.v1.value(), p.v2.value());
    Ok((0..states.len())
        .map(|r| PotentialParts {
            v0: v0.data[r],
            v1: v1.data[r],
            v2: v2.data[r],
        })
        .collect())
}

fn model_local_energy(model: &PdeModel, u: &RealGridField) -> f64 {
    u.values().iter().map(|&x| model.local_energy(x)).sum::<f64>() * u.grid().cell_volume()
}

pub fn learned_potential(params: &ModelParameters, u: &RealGridField) -> Result<PotentialParts> {
    Ok(learned_potential_batch(params, &[u])?[0])
}

/// `F(u)` of the pointwise network at each value.
pub fn pointwise_f(params: &ModelParameters, values: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let g = Graph::new(&tape, params);
    let x = tape.var(Mat::col(values.to_vec()));
    let f = mlp_forward(&params.config.f_spec(), &g.vars.phi_f, x);
    tape.check()?;
    Ok(f.value().data.clone())
}

/// Switches a configuration to the known-potential variant for `model`.
pub fn known_potential_mode(mut config: ModelConfig, model: PdeModel) -> ModelConfig {
    config.potential = PotentialMode::Known(model);
    config
}

fn potential_fields(p: &PotentialMode, out: &mut Vec<(String, String)>) {
    match p {
        PotentialMode::Learned => out.push(("potential".into(), "learned".into())),
        PotentialMode::Known(m) => {
            out.push(("potential".into(), m.name().into()));
            match m.kind {
                PdeKind::AllenCahn => out.push(("ac_epsilon".into(), m.ac_epsilon.to_string())),
                PdeKind::Kdv => {
                    out.push(("kdv_a".into(), m.kdv_a.to_string()));
                    out.push(("kdv_b".into(), m.kdv_b.to_string()));
                }
            }
        }
    }
}

/// `OMCKPT1 key=value ...\n`, the flat parameter vector as little-endian f64,
/// then the CRC-64/XZ of those parameter bytes (little-endian).
pub fn encode_checkpoint(params: &ModelParameters, extra: &BTreeMap<String, String>) -> Vec<u8> {
    let c = &params.config;
    let mut fields: Vec<(String, String)> = vec![
        ("n_points".into(), c.n_points.to_string()),
        ("length".into(), c.length.to_string()),
        ("cutoff".into(), c.cutoff.to_string()),
        ("width".into(), c.width.to_string()),
        ("depth".into(), c.depth.to_string()),
        ("hidden".into(), c.hidden.name().into()),
        ("last_hidden".into(), "sine".into()),
        ("init".into(), "uniform-sqrt6-fanin".into()),
        ("init_seed".into(), params.init_seed.to_string()),
        ("n_params".into(), params.n_params().to_string()),
        ("structure".into(), c.structure.name().into()),
    ];
    potential_fields(&c.potential, &mut fields);
    for (k, v) in extra {
        fields.push((format!("x_{k}"), v.replace([' ', '\n'], "_")));
    }
    let mut header = String::from(CKPT_MAGIC);
    for (k, v) in fields {
        header.push(' ');
        header.push_str(&k);
        header.push('=');
        header.push_str(&v);
    }
    header.push('\n');
    let mut blob = Vec::with_capacity(params.n_params() * 8);
    for v in params.flatten() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = header.into_bytes();
    let crc = crc64(&blob);
    out.extend_from_slice(&blob);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_checkpoint(
    params: &ModelParameters,
    extra: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, extra))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParameters, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(
    bytes: &[u8],
    path: &Path,
) -> Result<(ModelParameters, BTreeMap<String, String>)> {
    let magic = format!("{CKPT_MAGIC} ");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            expected: CKPT_MAGIC,
        });
    }
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::TruncatedFile {
        path: path.to_path_buf(),
        detail: "header line is not terminated".into(),
    })?;
    let header =
        std::str::from_utf8(&bytes[magic.len()..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let f = parse_header_fields(header)?;
    let get = |k: &str| f.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Format(format!("`{k}` is not a number")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format(format!("`{k}` is not an integer")))
    };
    let potential = match get("potential")?.as_str() {
        "learned" => PotentialMode::Learned,
        "allen-cahn" => PotentialMode::Known(PdeModel::allen_cahn(num("ac_epsilon")?)),
        "kdv" => PotentialMode::Known(PdeModel::kdv_with(num("kdv_a")?, num("kdv_b")?)),
        other => return Err(Error::Format(format!("unknown potential `{other}`"))),
    };
    let config = ModelConfig {
        n_points: int("n_points")?,
        length: num("length")?,
        cutoff: int("cutoff")?,
        width: int("width")?,
        depth: int("depth")?,
        hidden: Activation::parse(get("hidden")?)?,
        potential,
        structure: Structure::parse(get("structure")?)?,
    };
    let seed: u64 = get("init_seed")?
        .parse()
        .map_err(|_| Error::Format("`init_seed` is not an integer".into()))?;
    let mut params = ModelParameters::init(config, seed)?;
    let n = params.n_params();
    if int("n_params")? != n {
        return Err(Error::Format("parameter count does not match the architecture".into()));
    }
    let body = &bytes[nl + 1..];
    if body.len() < n * 8 + 8 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            detail: format!("expected {} body bytes, found {}", n * 8 + 8, body.len()),
        });
    }
    if body.len() > n * 8 + 8 {
        return Err(Error::Format("unexpected trailing bytes".into()));
    }
    let blob = &body[..n * 8];
    let stored = u64::from_le_bytes(body[n * 8..].try_into().expect("8 bytes"));
    let computed = crc64(blob);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    params.set_flat(&flat)?;
    let extra = f
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("x_").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((params, extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            width: 8,
            depth: 2,
            cutoff: 4,
            ..ModelConfig::new(16, 1.0)
        }
    }

    fn random_field(grid: &GridSpec, seed: u64, amp: f64) -> RealGridField {
        let cfg = crate::dataset::IcConfig {
            seed,
            max_wavenumber: 5,
            target_amp: amp,
            ..Default::default()
        };
        crate::dataset::random_initial_condition(&cfg, grid).unwrap()
    }

    fn zero_networks(p: &mut ModelParameters) {
        for m in p.phi_f.iter_mut().chain(p.phi_v.iter_mut()) {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn pack_round_trip() {
        let g = GridSpec::new_1d(16, 1.0).unwrap();
        let s = forward_transform(&random_field(&g, 3, 1.0)).unwrap();
        let packed = pack_half(&[&s]);
        assert_eq!(unpack_half(&packed, 0, &g), s);
    }

    #[test]
    fn linear_mu_when_networks_vanish() {
        let mut p = ModelParameters::init(small_cfg(), 1).unwrap();
        zero_networks(&mut p);
        p.raw_alpha = 0.3;
        p.raw_beta = -0.2;
        let g = p.config.grid();
        let u = random_field(&g, 4, 0.8);
        let uh = forward_transform(&u).unwrap();
        let mu = mu_hat_eval(&p, &u).unwrap();
        let want = uh.apply_multiplier(|k| {
            Complex64::new(p.alpha() + (2.0 * PI * k[0] as f64).powi(2) * p.beta(), 0.0)
        });
        for (a, b) in mu.coeffs().iter().zip(want.coeffs()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn wirtinger_of_squared_modulus() {
        let p = ModelParameters::init(small_cfg(), 2).unwrap();
        let grid = p.config.grid();
        let uh = forward_transform(&random_field(&grid, 5, 1.0)).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &p);
        let x = tape.var(pack_half(&[&uh]));
        let z = g.features(x);
        // v = |u_hat_1|^2 = a_1^2 + b_1^2.
        let c = p.config.cutoff + 1;
        let v = (z.slice_cols(1, 1).square() + z.slice_cols(c + 1, 1).square()).sum_cols();
        let contrib = g.v_contribution(z, v).unwrap();
        let out = unpack_half(&contrib.value(), 0, &grid);
        assert!((out.coeff([1, 0]) - uh.coeff([1, 0])).norm() < 1e-15);
        for k in [0i64, 2, 3, 8] {
            assert_eq!(out.coeff([k, 0]).norm(), 0.0);
        }
    }

    #[test]
    fn dt_zero_is_identity_and_reality_holds() {
        let p = ModelParameters::init(small_cfg(), 3).unwrap();
        let g = p.config.grid();
        let uh = forward_transform(&random_field(&g, 6, 1.0)).unwrap();
        assert_eq!(euler_spectral_step(&p, &uh, 0.0).unwrap(), uh);
        let next = euler_spectral_step(&p, &uh, 1e-3).unwrap();
        assert_eq!(next.hermitian_violation().0, 0.0);
    }

    #[test]
    fn multiplier_symmetries() {
        let p = ModelParameters::init(small_cfg(), 4).unwrap();
        let g = p.config.grid();
        let uh = forward_transform(&random_field(&g, 7, 1.0)).unwrap();
        let ms = multiplier_eval(&p, &uh).unwrap();
        let n = 16;
        assert_eq!(ms.w[0], Complex64::new(0.0, 0.0));
        assert_eq!(ms.w[n / 2].norm(), 0.0);
        for i in 0..n {
            assert!(ms.m[i].re >= 0.0 && ms.m[i].im == 0.0 && ms.w[i].re == 0.0);
            assert_eq!(ms.m[i], ms.m[(n - i) % n]);
            assert_eq!(ms.w[i], -ms.w[(n - i) % n]);
        }
    }

    #[test]
    fn potential_closed_forms() {
        let mut p = ModelParameters::init(small_cfg(), 5).unwrap();
        zero_networks(&mut p);
        let g = p.config.grid();
        let s = RealGridField::from_fn(g.clone(), |x| (2.0 * PI * x[0]).sin()).unwrap();
        let v = learned_potential(&p, &s).unwrap();
        let want = (p.alpha() + (2.0 * PI).powi(2) * p.beta()) / 4.0;
        assert!((v.total() - want).abs() < 1e-12);

        let p2 = ModelParameters::init(small_cfg(), 6).unwrap();
        let zero = RealGridField::zeros(g);
        let f0 = pointwise_f(&p2, &[0.0]).unwrap()[0];
        let parts = learned_potential(&p2, &zero).unwrap();
        assert!((parts.v0 - f0).abs() < 1e-15);
        assert_eq!(parts.v1, 0.0);
    }

    #[test]
    fn known_potential_mu() {
        let g = GridSpec::new_1d(32, 1.0).unwrap();
        let kdv = ModelParameters::init(known_potential_mode(ModelConfig { n_points: 32, ..small_cfg() }, PdeModel::kdv()), 1).unwrap();
        let s = RealGridField::from_fn(g.clone(), |x| (2.0 * PI * x[0]).sin()).unwrap();
        let mu = inverse_unchecked(&mu_hat_eval(&kdv, &s).unwrap());
        for (j, x) in g.axis_coords(0).iter().enumerate() {
            let u = (2.0 * PI * x).sin();
            let want = (2.0 * PI).powi(2) * u - 3.0 * u * u;
            assert!((mu.values()[j] - want).abs() < 1e-10);
        }
        let ac = ModelParameters::init(
            known_potential_mode(ModelConfig { n_points: 32, ..small_cfg() }, PdeModel::allen_cahn(0.1)),
            1,
        )
        .unwrap();
        let one = RealGridField::constant(g, 1.0);
        let mu = mu_hat_eval(&ac, &one).unwrap();
        assert!(mu.coeffs().iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParameters::init(small_cfg(), 9).unwrap();
        p.raw_alpha = -1.25;
        let mut extra = BTreeMap::new();
        extra.insert("dt".to_string(), "0.001".to_string());
        let bytes = encode_checkpoint(&p, &extra);
        let (back, ex) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, p);
        assert_eq!(ex, extra);
        let mut bad = bytes.clone();
        let i = bad.len() - 12;
        bad[i] ^= 4;
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("mem")),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
