//! K-step rollout loss, the training loop and evaluation metrics.
//!
//! One epoch is one Adam update. With `batch_size = None` the update uses every
//! window of every training trajectory; otherwise it uses the next
//! `batch_size` windows of a seeded shuffle (reshuffled after each pass).
//! A window is a start snapshot `s` with `s + K` inside the trajectory.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{AdamState, Mat, Tape, Var};
use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::onsager::{pack_half, rollout, Graph, ModelParameters};
use crate::rng::SplitMix64;
use crate::spectral::{forward_transform, RealGridField};

/// Windows per tape when evaluating large window sets; bounds tape memory.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k_steps: usize,
    pub lr: f64,
    pub plateau_patience_epochs: usize,
    pub lr_decay_factor: f64,
    pub validation_every: usize,
    pub early_stop_validations: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// `None` is full-batch.
    pub batch_size: Option<usize>,
    /// Rescales the gradient to this global L2 norm when exceeded.
    pub grad_clip: Option<f64>,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_steps: 3,
            lr: 1e-3,
            plateau_patience_epochs: 300,
            lr_decay_factor: 0.5,
            validation_every: 100,
            early_stop_validations: 5,
            seed: 0,
            max_epochs: 1000,
            batch_size: None,
            grad_clip: None,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_steps == 0 {
            return Err(Error::Config("k_steps must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1)".into()));
        }
        if self.validation_every == 0 || self.early_stop_validations == 0 {
            return Err(Error::Config(
                "validation_every and early_stop_validations must be positive".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning-rate and early-stopping bookkeeping, driven by validation losses.
///
/// A validation improves only if it is strictly below the best seen so far.
/// When `patience` epochs pass without improvement the rate is multiplied by
/// `decay` and the plateau clock restarts. After `stop_after` consecutive
/// non-improving validations training stops.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    pub best_epoch: usize,
    patience: usize,
    decay: f64,
    stop_after: usize,
    plateau_start: usize,
    bad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NotImproved,
    Stop,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            best: f64::INFINITY,
            best_epoch: 0,
            patience: cfg.plateau_patience_epochs,
            decay: cfg.lr_decay_factor,
            stop_after: cfg.early_stop_validations,
            plateau_start: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> Verdict {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.plateau_start = epoch;
            self.bad = 0;
            return Verdict::Improved;
        }
        self.bad += 1;
        if self.bad >= self.stop_after {
            return Verdict::Stop;
        }
        if epoch - self.plateau_start >= self.patience {
            self.lr *= self.decay;
            self.plateau_start = epoch;
        }
        Verdict::NotImproved
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub lr: Vec<f64>,
    /// `(epoch, mean validation loss)`; epoch 0 is the initial model.
    pub validation: Vec<(usize, f64)>,
    pub wall_clock_s: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,lr`; wall-clock is left out so that
    /// repeated runs write identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        let mut vals = self.validation.iter().peekable();
        if let Some(&&(0, v)) = vals.peek() {
            let _ = writeln!(s, "0,,{v:e},");
            vals.next();
        }
        for (i, &e) in self.epochs.iter().enumerate() {
            let val = match vals.peek() {
                Some(&&(ve, v)) if ve == e => {
                    vals.next();
                    format!("{v:e}")
                }
                _ => String::new(),
            };
            let _ = writeln!(s, "{e},{:e},{val},{:e}", self.train_loss[i], self.lr[i]);
        }
        s
    }
}

/// Packed spectra and physical values of every snapshot of one trajectory.
struct Prepared {
    spectra: Mat,
    values: Mat,
}

fn prepare(traj: &Trajectory) -> Result<Prepared> {
    let n = traj.grid().size();
    let specs = traj
        .snapshots()
        .iter()
        .map(forward_transform)
        .collect::<Result<Vec<_>>>()?;
    let mut values = Mat::zeros(traj.len(), n);
    for (r, s) in traj.snapshots().iter().enumerate() {
        values.data[r * n..(r + 1) * n].copy_from_slice(s.values());
    }
    Ok(Prepared {
        spectra: pack_half(&specs.iter().collect::<Vec<_>>()),
        values,
    })
}

fn gather(m: &Mat, rows: impl Iterator<Item = usize>) -> Mat {
    let mut data = Vec::new();
    let mut count = 0;
    for r in rows {
        data.extend_from_slice(m.row_slice(r));
        count += 1;
    }
    Mat::new(count, m.cols, data)
}

fn check_compat(params: &ModelParameters, sets: &[&Trajectory], k: usize) -> Result<f64> {
    let cfg = &params.config;
    let dt = sets.first().map(|t| t.dt_record()).unwrap_or(0.0);
    for t in sets {
        let g = t.grid();
        if g.dim() != 1 || g.points()[0] != cfg.n_points || g.lengths()[0] != cfg.length {
            return Err(Error::InvalidGrid(format!(
                "trajectory grid {:?} does not match the model ({} points, length {})",
                g.points(),
                cfg.n_points,
                cfg.length
            )));
        }
        if t.len() <= k {
            return Err(Error::Config(format!(
                "trajectory has {} snapshots; K = {k} needs more",
                t.len()
            )));
        }
        if t.dt_record() != dt {
            return Err(Error::Config("trajectories have different recording steps".into()));
        }
    }
    Ok(dt)
}

/// Sum over `windows` of the K-step loss, recorded on `g`'s tape.
fn windows_loss<'t>(
    g: &Graph<'t, '_>,
    data: &[Prepared],
    windows: &[(usize, usize)],
    k: usize,
    dt: f64,
    check: bool,
) -> Result<Var<'t>> {
    let tape = g.tape;
    let h = g.params.config.length / g.params.config.n_points as f64;
    let x0 = {
        let rows: Vec<Mat> = windows
            .iter()
            .map(|&(t, s)| gather(&data[t].spectra, std::iter::once(s)))
            .collect();
        stack(&rows)
    };
    let mut x = tape.var(x0);
    let mut total: Option<Var<'t>> = None;
    for step in 1..=k {
        x = g.step(x, dt)?;
        if check {
            let v = x.value();
            if let Some(r) = (0..v.rows).find(|&r| v.row_slice(r).iter().any(|z| !z.is_finite())) {
                return Err(Error::WindowBlowUp {
                    start: windows[r].1,
                    k: step,
                });
            }
        }
        let target = stack(
            &windows
                .iter()
                .map(|&(t, s)| gather(&data[t].values, std::iter::once(s + step)))
                .collect::<Vec<_>>(),
        );
        let d = x.irfft() - tape.var(target);
        let term = (d * d).sum().scale(h);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("k >= 1"))
}

fn stack(rows: &[Mat]) -> Mat {
    let cols = rows[0].cols;
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(&r.data);
    }
    Mat::new(data.len() / cols, cols, data)
}

/// Loss summed over `windows`, evaluated in chunks; no gradient.
fn sum_loss(
    params: &ModelParameters,
    data: &[Prepared],
    windows: &[(usize, usize)],
    k: usize,
    dt: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(CHUNK) {
        let tape = Tape::new();
        let g = Graph::new(&tape, params);
        total += windows_loss(&g, data, chunk, k, dt, true)?.item();
    }
    Ok(total)
}

/// Loss and flat gradient summed over `windows` (fixed chunk order).
fn sum_loss_grad(
    params: &ModelParameters,
    data: &[Prepared],
    windows: &[(usize, usize)],
    k: usize,
    dt: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; params.n_params()];
    for chunk in windows.chunks(CHUNK) {
        let tape = Tape::new();
        let g = Graph::new(&tape, params);
        let loss = windows_loss(&g, data, chunk, k, dt, true)?;
        let grads = tape.gradient(loss, &g.vars.all())?;
        total += loss.item();
        for (a, b) in grad.iter_mut().zip(ModelParameters::flatten_grads(&grads)) {
            *a += b;
        }
    }
    Ok((total, grad))
}

fn all_windows(data: &[Prepared], k: usize) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.spectra.rows - k).map(move |s| (t, s)))
        .collect()
}

/// `sum_s sum_{k=1..K} h * sum_j (T^k(u_hat^s) - u^{s+k})_j^2` over every window.
pub fn k_step_loss(params: &ModelParameters, traj: &Trajectory, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let dt = check_compat(params, &[traj], k)?;
    let data = [prepare(traj)?];
    sum_loss(params, &data, &all_windows(&data, k), k, dt)
}

/// [`k_step_loss`] and its gradient in [`ModelParameters::flatten`] order.
pub fn k_step_loss_grad(
    params: &ModelParameters,
    traj: &Trajectory,
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let dt = check_compat(params, &[traj], k)?;
    let data = [prepare(traj)?];
    sum_loss_grad(params, &data, &all_windows(&data, k), k, dt)
}

fn mean_loss(
    params: &ModelParameters,
    data: &[Prepared],
    windows: &[(usize, usize)],
    k: usize,
    dt: f64,
) -> f64 {
    match sum_loss(params, data, windows, k, dt) {
        Ok(v) if v.is_finite() => v / windows.len() as f64,
        _ => f64::INFINITY,
    }
}

/// Adam on the mean per-window loss. Returns the parameters with the best
/// validation loss (the initial model counts as epoch 0).
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    init: ModelParameters,
) -> Result<(ModelParameters, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((init, history));
    }
    let all: Vec<&Trajectory> = train_set.iter().chain(val_set).collect();
    let dt = check_compat(&init, &all, cfg.k_steps)?;
    let k = cfg.k_steps;
    let train_data = train_set.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let val_data = val_set.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let train_windows = all_windows(&train_data, k);
    let val_windows = all_windows(&val_data, k);

    let clock = Instant::now();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order = train_windows.clone();
    let mut cursor = order.len();
    let mut schedule = Schedule::new(cfg);
    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr);
    adam.eps = cfg.adam_eps;

    let v0 = mean_loss(&params, &val_data, &val_windows, k, dt);
    schedule.observe(0, v0);
    history.validation.push((0, v0));
    let mut best = params.clone();

    for epoch in 1..=cfg.max_epochs {
        let batch: Vec<(usize, usize)> = match cfg.batch_size {
            None => train_windows.clone(),
            Some(b) => {
                let mut out = Vec::with_capacity(b);
                while out.len() < b.min(order.len()) {
                    if cursor == order.len() {
                        rng.shuffle(&mut order);
                        cursor = 0;
                    }
                    out.push(order[cursor]);
                    cursor += 1;
                }
                out
            }
        };
        let diverged = || Error::TrainingDiverged {
            epoch,
            last_good: Box::new(best.clone()),
        };
        let (loss, mut grad) = match sum_loss_grad(&params, &train_data, &batch, k, dt) {
            Ok(v) => v,
            Err(Error::WindowBlowUp { .. } | Error::NumericOverflow { .. }) => {
                return Err(diverged())
            }
            Err(e) => return Err(e),
        };
        let scale = 1.0 / batch.len() as f64;
        let loss = loss * scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged());
        }
        if let Some(c) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                grad.iter_mut().for_each(|g| *g *= c / norm);
            }
        }
        adam.lr = schedule.lr;
        adam.step(&mut flat, &grad);
        params.set_flat(&flat)?;

        history.epochs.push(epoch);
        history.train_loss.push(loss);
        history.lr.push(schedule.lr);
        history.wall_clock_s.push(clock.elapsed().as_secs_f64());

        if epoch % cfg.validation_every == 0 || epoch == cfg.max_epochs {
            let v = mean_loss(&params, &val_data, &val_windows, k, dt);
            history.validation.push((epoch, v));
            match schedule.observe(epoch, v) {
                Verdict::Improved => best = params.clone(),
                Verdict::NotImproved => {}
                Verdict::Stop => break,
            }
        }
    }
    history.best_epoch = schedule.best_epoch;
    Ok((best, history))
}

/// `sqrt(sum (pred - ref)^2 / sum ref^2)` over grid nodes.
pub fn relative_rmse(pred: &RealGridField, reference: &RealGridField) -> Result<f64> {
    if pred.grid() != reference.grid() {
        return Err(Error::InvalidGrid("prediction and reference grids differ".into()));
    }
    let den: f64 = reference.values().iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = pred
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((num / den).sqrt())
}

/// Per-trajectory error curves plus the step-5 summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `curves[t][s - 1]` is the error after `s` model steps; infinite after a blow-up.
    pub curves: Vec<Vec<f64>>,
    pub horizon: usize,
    /// Step at which the summary is taken: `min(5, horizon)`.
    pub summary_step: usize,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn step_errors(&self, step: usize) -> Vec<f64> {
        self.curves.iter().map(|c| c[step - 1]).collect()
    }

    /// `trajectory_id,step,relative_rmse`, then per-step `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory_id,step,relative_rmse\n");
        for (t, c) in self.curves.iter().enumerate() {
            for (i, e) in c.iter().enumerate() {
                let _ = writeln!(s, "{t},{},{e:e}", i + 1);
            }
        }
        for step in 1..=self.horizon {
            let (m, sd) = mean_std(&self.step_errors(step));
            let _ = writeln!(s, "mean,{step},{m:e}");
            let _ = writeln!(s, "std,{step},{sd:e}");
        }
        s
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Rolls every test trajectory forward from snapshot 0 for `horizon` steps.
pub fn evaluate(params: &ModelParameters, test_set: &[Trajectory], horizon: usize) -> Result<EvalReport> {
    if test_set.is_empty() || horizon == 0 {
        return Err(Error::Config("evaluation needs trajectories and a positive horizon".into()));
    }
    let refs: Vec<&Trajectory> = test_set.iter().collect();
    check_compat(params, &refs, horizon)?;
    let curves = test_set
        .par_iter()
        .map(|t| -> Result<Vec<f64>> {
            let snaps = t.snapshots();
            let pred = match rollout(params, &snaps[0], t.dt_record(), horizon) {
                Ok(p) => p,
                Err(Error::BlowUp { step }) => {
                    let mut p = rollout(params, &snaps[0], t.dt_record(), step - 1)?;
                    p.resize(horizon + 1, RealGridField::constant(t.grid().clone(), 0.0));
                    let mut errs = Vec::with_capacity(horizon);
                    for s in 1..=horizon {
                        errs.push(if s < step {
                            relative_rmse(&p[s], &snaps[s])?
                        } else {
                            f64::INFINITY
                        });
                    }
                    return Ok(errs);
                }
                Err(e) => return Err(e),
            };
            (1..=horizon).map(|s| relative_rmse(&pred[s], &snaps[s])).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let summary_step = horizon.min(5);
    let (mean, std) = mean_std(&curves.iter().map(|c| c[summary_step - 1]).collect::<Vec<_>>());
    Ok(EvalReport {
        curves,
        horizon,
        summary_step,
        mean,
        std,
    })
}
