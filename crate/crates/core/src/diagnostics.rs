//! Analyses of a trained model: potential traces, fits, step-size scaling,
//! amplitude scans and the multiplier constraint audit.
//!
//! Every figure-style output is plain data; [`DiagnosticsReport::to_csv`]
//! writes it with columns `entry,kind,x,y,seed,checkpoint`.

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::autodiff::Tape;
use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::onsager::{
    learned_potential_batch, mu_hat_eval, multiplier_eval, pack_half, pointwise_f, unpack_half,
    Graph, ModelParameters, MultiplierSet,
};
use crate::spectral::{forward_transform, inverse_unchecked, RealGridField, SpectralField, WaveNumbers};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReportEntry {
    Scalar(f64),
    Series { x: Vec<f64>, y: Vec<f64> },
    Fit(AffineFit),
}

/// Named results plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub seed: u64,
    pub checkpoint: String,
    pub entries: Vec<(String, ReportEntry)>,
}

impl DiagnosticsReport {
    pub fn new(seed: u64, checkpoint: impl Into<String>) -> Self {
        Self {
            seed,
            checkpoint: checkpoint.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, entry: ReportEntry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("entry,kind,x,y,seed,checkpoint\n");
        let tail = format!("{},{}", self.seed, self.checkpoint.replace(',', "_"));
        for (name, e) in &self.entries {
            match e {
                ReportEntry::Scalar(v) => {
                    let _ = writeln!(s, "{name},scalar,,{v:e},{tail}");
                }
                ReportEntry::Series { x, y } => {
                    for (a, b) in x.iter().zip(y) {
                        let _ = writeln!(s, "{name},series,{a:e},{b:e},{tail}");
                    }
                }
                ReportEntry::Fit(f) => {
                    for (k, v) in [("slope", f.slope), ("intercept", f.intercept), ("r2", f.r2)] {
                        let _ = writeln!(s, "{name},fit,{k},{v:e},{tail}");
                    }
                }
            }
        }
        s
    }
}

/// `V_theta` at every snapshot.
pub fn potential_trace(params: &ModelParameters, traj: &Trajectory) -> Result<Vec<f64>> {
    let refs: Vec<&RealGridField> = traj.snapshots().iter().collect();
    Ok(learned_potential_batch(params, &refs)?
        .iter()
        .map(|p| p.total())
        .collect())
}

/// Ordinary least squares `y = slope x + intercept`. `r2` is 0 when `y` is constant.
pub fn affine_fit(x: &[f64], y: &[f64]) -> Result<AffineFit> {
    if x.len() != y.len() {
        return Err(Error::Shape("x and y lengths differ".into()));
    }
    if x.len() < 3 {
        return Err(Error::DegenerateFit(format!("need >= 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all x values are equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r2 = if syy == 0.0 {
        0.0
    } else {
        let ss_res: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - slope * a - intercept).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(AffineFit { slope, intercept, r2 })
}

/// Log-log fit; `slope` is the exponent. Non-positive points are rejected.
pub fn power_law_fit(x: &[f64], y: &[f64]) -> Result<AffineFit> {
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateFit("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    affine_fit(&lx, &ly)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationScaling {
    pub dt: Vec<f64>,
    pub median_variation: Vec<f64>,
    pub fit: AffineFit,
    /// States whose step was non-finite, summed over all `dt`.
    pub excluded: usize,
}

impl VariationScaling {
    pub fn exponent(&self) -> f64 {
        self.fit.slope
    }
}

/// Fits `median_i variation(i, dt) ~ c dt^p` where `variation` returns `None`
/// for excluded (blown-up) samples.
pub fn variation_scaling_from(
    dt_list: &[f64],
    n_states: usize,
    mut variation: impl FnMut(f64) -> Result<Vec<Option<f64>>>,
) -> Result<VariationScaling> {
    let lo = dt_list.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dt_list.iter().copied().fold(0.0, f64::max);
    if !(lo > 0.0) || hi < 10.0 * lo * (1.0 - 1e-12) {
        return Err(Error::Config("dt_list must be positive and span at least one decade".into()));
    }
    if n_states == 0 {
        return Err(Error::Config("no test states".into()));
    }
    let mut excluded = 0;
    let mut dts = Vec::new();
    let mut meds = Vec::new();
    for &dt in dt_list {
        let vals = variation(dt)?;
        let mut ok: Vec<f64> = vals.iter().filter_map(|v| *v).collect();
        excluded += vals.len() - ok.len();
        if ok.is_empty() {
            continue;
        }
        dts.push(dt);
        meds.push(median(&mut ok));
    }
    let fit = power_law_fit(&dts, &meds)?;
    Ok(VariationScaling {
        dt: dts,
        median_variation: meds,
        fit,
        excluded,
    })
}

/// `|V(step_dt(u)) - V(u)|` over `test_ics` for each `dt`, median per `dt`,
/// then a log-log fit against `dt`.
pub fn one_step_variation_scaling(
    params: &ModelParameters,
    test_ics: &[RealGridField],
    dt_list: &[f64],
) -> Result<VariationScaling> {
    let refs: Vec<&RealGridField> = test_ics.iter().collect();
    let v0: Vec<f64> = learned_potential_batch(params, &refs)?
        .iter()
        .map(|p| p.total())
        .collect();
    let specs = test_ics.iter().map(forward_transform).collect::<Result<Vec<_>>>()?;
    let packed = pack_half(&specs.iter().collect::<Vec<_>>());
    variation_scaling_from(dt_list, test_ics.len(), |dt| {
        let next = step_rows(params, &packed, dt)?;
        let fields: Vec<Option<RealGridField>> = next
            .iter()
            .map(|s| s.as_ref().map(inverse_unchecked))
            .collect();
        let good: Vec<&RealGridField> = fields.iter().flatten().collect();
        let mut vals = learned_potential_batch(params, &good)?.into_iter();
        Ok(fields
            .iter()
            .zip(&v0)
            .map(|(f, v)| f.as_ref().map(|_| (vals.next().expect("one per state").total() - v).abs()))
            .collect())
    })
}

/// One model step per row; rows that become non-finite are `None`.
fn step_rows(
    params: &ModelParameters,
    packed: &crate::autodiff::Mat,
    dt: f64,
) -> Result<Vec<Option<SpectralField>>> {
    let tape = Tape::new();
    let g = Graph::new(&tape, params);
    let out = g.step(tape.var(packed.clone()), dt)?.value();
    let grid = params.config.grid();
    Ok((0..out.rows)
        .map(|r| {
            out.row_slice(r)
                .iter()
                .all(|v| v.is_finite())
                .then(|| unpack_half(&out, r, &grid))
        })
        .collect())
}

/// `kappa = 2 sum_k M_k |mu_k|^2 / sum_k (1 + kappa_k^2) |(M_k + W_k) mu_k|^2`.
/// Zero when both multipliers vanish on the support of `mu`.
pub fn kappa_from(ms: &MultiplierSet, mu: &SpectralField) -> Result<f64> {
    if mu.coeffs().iter().all(|c| c.norm_sqr() == 0.0) {
        return Err(Error::ZeroDrivingForce);
    }
    let wn = WaveNumbers::new(mu.grid());
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, c) in mu.coeffs().iter().enumerate() {
        num += ms.m[i].re * c.norm_sqr();
        den += (1.0 + wn.k_squared()[i]) * ((ms.m[i] + ms.w[i]) * c).norm_sqr();
    }
    Ok(if den == 0.0 { 0.0 } else { 2.0 * num / den })
}

/// `kappa` of the learned operators at `u`.
pub fn critical_dt_estimate(params: &ModelParameters, u: &RealGridField) -> Result<f64> {
    let mu = mu_hat_eval(params, u)?;
    let ms = multiplier_eval(params, &forward_transform(u)?)?;
    kappa_from(&ms, &mu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeScan {
    pub amplitudes: Vec<f64>,
    pub v0: Vec<f64>,
    pub v2: Vec<f64>,
    /// Log-log fit of `|V0|` over positive amplitudes; `None` with fewer than 3 usable points.
    pub v0_fit: Option<AffineFit>,
}

impl AmplitudeScan {
    /// `(max - min)` of `V0` over `(max - min)` of `V2`.
    pub fn dynamic_range_ratio(&self) -> f64 {
        let span = |v: &[f64]| {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        span(&self.v0) / span(&self.v2)
    }
}

pub fn amplitude_scan(params: &ModelParameters, u0: &RealGridField, amplitudes: &[f64]) -> Result<AmplitudeScan> {
    let fields = amplitudes
        .iter()
        .map(|&a| u0.map(|v| a * v))
        .collect::<Result<Vec<_>>>()?;
    let parts = learned_potential_batch(params, &fields.iter().collect::<Vec<_>>())?;
    let v0: Vec<f64> = parts.iter().map(|p| p.v0).collect();
    let v2: Vec<f64> = parts.iter().map(|p| p.v2).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = amplitudes
        .iter()
        .zip(&v0)
        .filter(|(a, v)| **a > 0.0 && v.abs() > 0.0)
        .map(|(a, v)| (*a, v.abs()))
        .unzip();
    let v0_fit = if xs.len() >= 3 { power_law_fit(&xs, &ys).ok() } else { None };
    Ok(AmplitudeScan {
        amplitudes: amplitudes.to_vec(),
        v0,
        v2,
        v0_fit,
    })
}

/// `F(u)` on `n` equispaced values spanning `[lo, hi]`.
pub fn pointwise_f_profile(params: &ModelParameters, lo: f64, hi: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 || !(hi > lo) {
        return Err(Error::Config("profile needs n >= 2 and hi > lo".into()));
    }
    let u: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let f = pointwise_f(params, &u)?;
    Ok((u, f))
}

/// `(|int_0^r F(u) + F(-u) du|, int_0^r |F(u) - F(-u)| du)` by the trapezoid rule.
pub fn f_parity_integrals(params: &ModelParameters, r: f64, n: usize) -> Result<(f64, f64)> {
    let (u, fp) = pointwise_f_profile(params, 0.0, r, n)?;
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    let fm = pointwise_f(params, &neg)?;
    let trap = |g: &dyn Fn(usize) -> f64| {
        let h = r / (n - 1) as f64;
        (0..n - 1).map(|i| 0.5 * h * (g(i) + g(i + 1))).sum::<f64>()
    };
    let even = trap(&|i| fp[i] + fm[i]).abs();
    let odd = trap(&|i| (fp[i] - fm[i]).abs());
    Ok((even, odd))
}

/// One failed clause of the multiplier constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub state: usize,
    pub clause: &'static str,
    pub mode: usize,
    pub magnitude: f64,
}

/// Exact checks: `M` real, non-negative and even; `W` imaginary and odd with
/// `W[0] = 0` and `W[N/2] = 0`.
pub fn audit_multipliers(ms: &MultiplierSet, state: usize) -> Vec<Violation> {
    let n = ms.m.len();
    let mut out = Vec::new();
    let mut flag = |clause, mode, magnitude: f64| {
        if magnitude != 0.0 {
            out.push(Violation {
                state,
                clause,
                mode,
                magnitude,
            });
        }
    };
    for i in 0..n {
        let j = (n - i) % n;
        flag("M real", i, ms.m[i].im.abs());
        flag("M nonnegative", i, (-ms.m[i].re).max(0.0));
        flag("M even", i, (ms.m[i] - ms.m[j]).norm());
        flag("W imaginary", i, ms.w[i].re.abs());
        flag("W odd", i, (ms.w[i] + ms.w[j]).norm());
    }
    flag("W zero mode", 0, ms.w[0].norm());
    flag("W Nyquist", n / 2, ms.w[n / 2].norm());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub states: usize,
    pub violations: Vec<Violation>,
    /// Largest Hermitian defect of `u - dt (M + W) mu` formed in the full spectrum.
    pub max_leakage: f64,
    /// Largest Hermitian defect of the states the model actually produces.
    pub max_projected: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.max_leakage <= 1e-10 && self.max_projected == 0.0
    }
}

/// Audits the multipliers at every state and along `steps` model steps of size `dt` from it.
pub fn constraint_audit(
    params: &ModelParameters,
    states: &[RealGridField],
    steps: usize,
    dt: f64,
) -> Result<AuditReport> {
    let mut report = AuditReport {
        states: states.len(),
        violations: Vec::new(),
        max_leakage: 0.0,
        max_projected: 0.0,
    };
    for (i, u) in states.iter().enumerate() {
        let mut spec = forward_transform(u)?;
        for _ in 0..=steps {
            let ms = multiplier_eval(params, &spec)?;
            report.violations.extend(audit_multipliers(&ms, i));
            let field = inverse_unchecked(&spec);
            let mu = mu_hat_eval(params, &field)?;
            let coeffs: Vec<Complex64> = spec
                .coeffs()
                .iter()
                .zip(mu.coeffs())
                .enumerate()
                .map(|(k, (c, m))| c - dt * (ms.m[k] + ms.w[k]) * m)
                .collect();
            let full = SpectralField::from_coeffs(spec.grid().clone(), coeffs)?;
            report.max_leakage = report.max_leakage.max(full.hermitian_violation().0);
            spec = crate::onsager::euler_spectral_step(params, &spec, dt)?;
            report.max_projected = report.max_projected.max(spec.hermitian_violation().0);
        }
    }
    Ok(report)
}

/// Monotonicity of `V_theta` along a model rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCheck {
    pub values: Vec<f64>,
    /// Steps `s` with `V(u^s) > V(u^{s-1})`.
    pub increases: Vec<usize>,
    /// Step at which the rollout blew up.
    pub diverged_at: Option<usize>,
}

impl MonotoneCheck {
    pub fn monotone(&self) -> bool {
        self.increases.is_empty() && self.diverged_at.is_none()
    }
}

pub fn potential_monotonicity(
    params: &ModelParameters,
    u0: &RealGridField,
    dt: f64,
    steps: usize,
) -> Result<MonotoneCheck> {
    let (snaps, diverged_at) = match crate::onsager::rollout(params, u0, dt, steps) {
        Ok(s) => (s, None),
        Err(Error::BlowUp { step }) => (crate::onsager::rollout(params, u0, dt, step - 1)?, Some(step)),
        Err(e) => return Err(e),
    };
    let (values, diverged_at) = match learned_potential_batch(params, &snaps.iter().collect::<Vec<_>>()) {
        Ok(parts) => (parts.iter().map(|p| p.total()).collect::<Vec<f64>>(), diverged_at),
        // Finite states can still overflow inside V; the first such state counts as the blow-up.
        Err(Error::NumericOverflow { .. }) => {
            let mut values = Vec::new();
            let mut at = diverged_at;
            for (s, u) in snaps.iter().enumerate() {
                match crate::onsager::learned_potential(params, u) {
                    Ok(p) if p.total().is_finite() => values.push(p.total()),
                    Ok(_) | Err(Error::NumericOverflow { .. }) => {
                        at = Some(s);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            (values, at)
        }
        Err(e) => return Err(e),
    };
    let increases = (1..values.len()).filter(|&s| values[s] > values[s - 1]).collect();
    Ok(MonotoneCheck {
        values,
        increases,
        diverged_at,
    })
}

/// `max_s |V(u^s) - V(u^0)|` over the rollouts, divided by the spread of `V`
/// over every snapshot of `dataset`.
pub fn conservation_ratio(
    params: &ModelParameters,
    rollouts: &[Vec<RealGridField>],
    dataset: &[Trajectory],
) -> Result<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in dataset {
        for v in potential_trace(params, t)? {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let spread = hi - lo;
    if !(spread > 0.0) {
        return Err(Error::DegenerateFit("potential is constant over the dataset".into()));
    }
    let mut worst: f64 = 0.0;
    for r in rollouts {
        let v: Vec<f64> = learned_potential_batch(params, &r.iter().collect::<Vec<_>>())?
            .iter()
            .map(|p| p.total())
            .collect();
        for x in &v {
            worst = worst.max((x - v[0]).abs());
        }
    }
    Ok(worst / spread)
}
