//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any criterion fails. Extra arguments select criteria by substring.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use meso_core::chain::{simulate_chain, ForceLaw, ScalingParams, DEFAULT_MICRO_SUBSTEPS};
use meso_core::dataset::{encode_trajectory, random_initial_condition, IcConfig, Trajectory};
use meso_core::diagnostics::{
    affine_fit, conservation_ratio, constraint_audit, one_step_variation_scaling, potential_monotonicity,
    potential_trace, DiagnosticsReport, ReportEntry,
};
use meso_core::onsager::{encode_checkpoint, rollout, ModelConfig, ModelParameters, Structure};
use meso_core::pde::{free_energy, generate_pde_trajectories, simulate_pde, PdeModel, SolverConfig};
use meso_core::rng::SplitMix64;
use meso_core::spectral::{forward_transform, inverse_transform, GridSpec, RealGridField};
use meso_core::training::{evaluate, relative_rmse, train, TrainConfig};
use num_complex::Complex64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(secs: f64, limit: f64) -> bool {
    secs <= limit
}

fn l2_rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn spectral_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let (mut worst_fwd, mut worst_rt): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = 2 * (4 + rng.below(125) as usize);
        let grid = GridSpec::new_1d(n, 1.0 + rng.uniform_in(0.0, 3.0)).unwrap();
        let u = RealGridField::new(grid, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
        let spec = forward_transform(&u).unwrap();
        let mut scale: f64 = 0.0;
        let mut err: f64 = 0.0;
        for k in 0..n {
            let naive: Complex64 = u
                .values()
                .iter()
                .enumerate()
                .map(|(j, &x)| x * Complex64::from_polar(1.0, -2.0 * PI * (k * j) as f64 / n as f64))
                .sum::<Complex64>()
                / n as f64;
            scale = scale.max(naive.norm());
            err = err.max((spec.coeffs()[k] - naive).norm());
        }
        worst_fwd = worst_fwd.max(err / scale);
        let back = inverse_transform(&spec).unwrap();
        let rt = back.values().iter().zip(u.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_rt = worst_rt.max(rt / u.max_abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_fwd <= 1e-12 && worst_rt <= 1e-12 && within(secs, 10.0),
        format!("max rel err vs naive DFT {worst_fwd:.2e}, round trip {worst_rt:.2e}, {secs:.1}s"),
    )
}

fn sech2(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

fn kdv_soliton() -> Outcome {
    let t0 = Instant::now();
    let (c, x0, length) = (16.0, 10.0, 20.0);
    let grid = GridSpec::new_1d(512, length).unwrap();
    let exact = |t: f64| {
        RealGridField::from_fn(grid.clone(), |x| {
            let mut z = (x[0] - c * t - x0).rem_euclid(length);
            if z > length / 2.0 {
                z -= length;
            }
            0.5 * c * sech2(0.5 * c.sqrt() * z)
        })
        .unwrap()
    };
    let run = |dt: f64| {
        let substeps = (0.01 / dt).round() as usize;
        let cfg = SolverConfig { dt_record: 0.01, substeps, n_snapshots: 11, ..Default::default() };
        simulate_pde(&PdeModel::kdv(), &exact(0.0), &cfg).unwrap().snapshots()[10].clone()
    };
    let (coarse, mid, fine) = (run(2e-4), run(1e-4), run(5e-5));
    let err = l2_rel(mid.values(), exact(0.1).values());
    let order = (l2_rel(coarse.values(), mid.values()) / l2_rel(mid.values(), fine.values())).log2();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        err <= 1e-3 && order >= 1.8 && within(secs, 60.0),
        format!("rel L2 error at T=0.1 {err:.2e}, self-convergence order {order:.2}, {secs:.1}s"),
    )
}

fn allen_cahn_dissipation() -> Outcome {
    let t0 = Instant::now();
    let model = PdeModel::allen_cahn(0.1);
    let grid = GridSpec::new_1d(256, 1.0).unwrap();
    let trajs =
        generate_pde_trajectories(&model, &grid, &IcConfig::default(), &SolverConfig::default(), 77, 10).unwrap();
    let mut worst_rise = f64::NEG_INFINITY;
    for t in &trajs {
        let e: Vec<f64> = t.snapshots().iter().map(|s| free_energy(&model, s)).collect();
        for w in e.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    let n_snaps = trajs.iter().map(|t| t.len()).min().unwrap_or(0);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_rise <= 1e-9 && n_snaps == 100 && within(secs, 60.0),
        format!("largest step-to-step free-energy change {worst_rise:.2e} over 10 x {n_snaps} snapshots, {secs:.1}s"),
    )
}

fn chain_continuum() -> Outcome {
    let t0 = Instant::now();
    let grid = GridSpec::new_1d(128, 1.0).unwrap();
    let scaling = ScalingParams::fput_default();
    let law = ForceLaw::fput_default();
    let kdv = PdeModel::kdv_with(1.0, 1.0 / 24.0);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let ic = IcConfig { seed, max_wavenumber: 2, ..Default::default() };
        let u0 = random_initial_condition(&ic, &grid).unwrap();
        let chain_cfg = SolverConfig { substeps: DEFAULT_MICRO_SUBSTEPS, n_snapshots: 101, ..Default::default() };
        let micro = simulate_chain(&law, &scaling, &u0, &chain_cfg, scaling.node_count(1.0)).unwrap();
        let pde_cfg = SolverConfig { n_snapshots: 101, ..Default::default() };
        let macro_ = simulate_pde(&kdv, &u0, &pde_cfg).unwrap();
        let e = relative_rmse(&micro.snapshots()[100], &macro_.snapshots()[100]).unwrap();
        worst = worst.max(e);
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 0.05 && within(secs, 300.0),
        format!("worst relative RMSE at T=0.1 over 3 ICs {worst:.4}, {secs:.1}s"),
    )
}

fn ad_correctness() -> Outcome {
    let t0 = Instant::now();
    let (prim, prim_name) = common::worst_first_order();
    let (hvp, hvp_name) = common::worst_double_backward();
    let fd_mu = common::worst_functional_derivative();
    let v_hvp = common::v_gradient_hvp_error();
    let loss = common::loss_gradient_errors();
    let (loss_worst, loss_name) = loss.iter().fold((0.0, ""), |a, &(n, e)| if e > a.0 { (e, n) } else { a });
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        prim <= 1e-5 && fd_mu <= 1e-5 && loss_worst <= 1e-5 && hvp <= 1e-4 && v_hvp <= 1e-4 && within(secs, 60.0),
        format!(
            "primitives {prim:.1e} ({prim_name}), mu vs dV {fd_mu:.1e}, loss grad {loss_worst:.1e} ({loss_name}), \
             primitive HVP {hvp:.1e} ({hvp_name}), grad-v HVP {v_hvp:.1e}, {secs:.1}s"
        ),
    )
}

fn structural_exactness() -> Outcome {
    let t0 = Instant::now();
    let structures = [Structure::General, Structure::Dissipative, Structure::Conservative];
    let mut violations = 0;
    let (mut leak, mut projected, mut imag): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for pair in 0..100u64 {
        let cfg = ModelConfig {
            width: 16,
            depth: 2,
            cutoff: 8,
            structure: structures[pair as usize % 3],
            ..ModelConfig::new(32, 1.0)
        };
        let p = common::perturbed_model(cfg, pair, 0.2);
        let u = common::field(&p.config.grid(), 500 + pair, 8, 1.0);
        let report = constraint_audit(&p, std::slice::from_ref(&u), 3, 1e-4).unwrap();
        violations += report.violations.len() + usize::from(!report.passed());
        leak = leak.max(report.max_leakage);
        projected = projected.max(report.max_projected);
        for s in rollout(&p, &u, 1e-4, 3).unwrap() {
            imag = imag.max(forward_transform(&s).unwrap().hermitian_violation().0);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        violations == 0 && projected == 0.0 && imag == 0.0 && within(secs, 60.0),
        format!(
            "100 pairs: {violations} violations, unprojected leakage {leak:.1e}, projected {projected:e}, \
             snapshot Hermitian defect {imag:e}, {secs:.1}s"
        ),
    )
}

struct TrainedAc {
    params: ModelParameters,
    test: Vec<Trajectory>,
    secs: f64,
}

fn train_allen_cahn() -> TrainedAc {
    let t0 = Instant::now();
    let n = 128;
    let grid = GridSpec::new_1d(n, 1.0).unwrap();
    let model = PdeModel::allen_cahn(0.1);
    let ic = IcConfig::default();
    let sc = SolverConfig::default();
    let tr = generate_pde_trajectories(&model, &grid, &ic, &sc, 1, 20).unwrap();
    let va = generate_pde_trajectories(&model, &grid, &ic, &sc, 2, 5).unwrap();
    let test = generate_pde_trajectories(&model, &grid, &ic, &sc, 3, 10).unwrap();
    let init = ModelParameters::init(ModelConfig { width: 32, depth: 3, ..ModelConfig::new(n, 1.0) }, 5).unwrap();
    let cfg = TrainConfig {
        k_steps: 3,
        lr: 1e-2,
        adam_eps: 1e-6,
        batch_size: Some(32),
        max_epochs: 2000,
        seed: 9,
        ..Default::default()
    };
    let (params, _) = train(&cfg, &tr, &va, init).unwrap();
    TrainedAc { params, test, secs: t0.elapsed().as_secs_f64() }
}

fn ac_prediction(ac: &TrainedAc) -> Outcome {
    let r = evaluate(&ac.params, &ac.test, 5).unwrap();
    outcome(
        r.mean <= 0.05 && within(ac.secs, 1800.0),
        format!("5-step relative error {:.4} +- {:.4}, data + training {:.0}s", r.mean, r.std, ac.secs),
    )
}

fn ac_identifiability(ac: &TrainedAc) -> Outcome {
    let model = PdeModel::allen_cahn(0.1);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for t in &ac.test {
        xs.extend(t.snapshots().iter().map(|s| free_energy(&model, s)));
        ys.extend(potential_trace(&ac.params, t).unwrap());
    }
    let fit = affine_fit(&xs, &ys).unwrap();
    outcome(
        fit.r2 >= 0.9,
        format!("R^2 {:.4} (slope {:.4e}) over {} snapshots", fit.r2, fit.slope, xs.len()),
    )
}

fn ac_bracketing(ac: &TrainedAc) -> Outcome {
    let t0 = Instant::now();
    let dt = ac.test[0].dt_record();
    let steps = ac.test[0].len() - 1;
    let count = |mult: f64| {
        ac.test
            .iter()
            .filter(|t| !potential_monotonicity(&ac.params, &t.snapshots()[0], mult * dt, steps).unwrap().monotone())
            .count()
    };
    let (at1, at3) = (count(1.0), count(3.0));
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        at1 == 0 && at3 >= 1 && within(secs, 300.0),
        format!("non-monotone rollouts: {at1}/10 at 1x dt, {at3}/10 at 3x dt, {secs:.1}s"),
    )
}

fn kdv_near_conservation() -> Outcome {
    let t0 = Instant::now();
    let n = 128;
    let grid = GridSpec::new_1d(n, 1.0).unwrap();
    let model = PdeModel::kdv_with(1.0, 1.0 / 240.0);
    let ic = IcConfig { max_wavenumber: 3, target_amp: 0.5, ..Default::default() };
    let sc = SolverConfig { dt_record: 2.5e-4, ..Default::default() };
    let tr = generate_pde_trajectories(&model, &grid, &ic, &sc, 1, 20).unwrap();
    let va = generate_pde_trajectories(&model, &grid, &ic, &sc, 2, 5).unwrap();
    let te = generate_pde_trajectories(&model, &grid, &ic, &sc, 3, 10).unwrap();
    let cfg = ModelConfig { structure: Structure::Conservative, width: 32, depth: 3, ..ModelConfig::new(n, 1.0) };
    let tc = TrainConfig {
        k_steps: 3,
        lr: 1e-2,
        adam_eps: 1e-6,
        batch_size: Some(32),
        max_epochs: 1000,
        seed: 9,
        ..Default::default()
    };
    let (p, _) = train(&tc, &tr, &va, ModelParameters::init(cfg, 5).unwrap()).unwrap();
    let dt = sc.dt_record;
    let rolls: Vec<_> = te.iter().map(|t| rollout(&p, &t.snapshots()[0], dt, 100).unwrap()).collect();
    let ratio = conservation_ratio(&p, &rolls, &te).unwrap();
    let ics: Vec<_> = te.iter().map(|t| t.snapshots()[0].clone()).collect();
    let dts: Vec<f64> = [0.1, 0.2, 0.3, 0.5, 0.7, 1.0].iter().map(|f| f * dt).collect();
    let scaling = one_step_variation_scaling(&p, &ics, &dts).unwrap();
    let five = evaluate(&p, &te, 5).unwrap().mean;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        ratio <= 0.05 && scaling.exponent() >= 1.0 && within(secs, 2700.0),
        format!(
            "conservation ratio {ratio:.4}, variation exponent {:.3} (R^2 {:.3}), 5-step error {five:.4}, {secs:.0}s",
            scaling.exponent(),
            scaling.fit.r2
        ),
    )
}

/// Generation, training, evaluation and diagnostics reduced to bytes.
fn pipeline_bytes() -> Vec<Vec<u8>> {
    let grid = GridSpec::new_1d(32, 1.0).unwrap();
    let model = PdeModel::allen_cahn(0.1);
    let ic = IcConfig { max_wavenumber: 4, ..Default::default() };
    let sc = SolverConfig { n_snapshots: 12, ..Default::default() };
    let data = generate_pde_trajectories(&model, &grid, &ic, &sc, 8, 4).unwrap();
    let mut out: Vec<Vec<u8>> = data.iter().map(|t| encode_trajectory(t).unwrap()).collect();
    let init = ModelParameters::init(ModelConfig { width: 8, depth: 2, cutoff: 8, ..ModelConfig::new(32, 1.0) }, 1).unwrap();
    let tc = TrainConfig { lr: 1e-2, max_epochs: 40, validation_every: 10, batch_size: Some(8), seed: 2, ..Default::default() };
    let (p, hist) = train(&tc, &data[..3], &data[3..], init).unwrap();
    out.push(encode_checkpoint(&p, &Default::default()));
    out.push(hist.to_csv().into_bytes());
    out.push(evaluate(&p, &data[3..], 5).unwrap().to_csv().into_bytes());
    let mut report = DiagnosticsReport::new(2, "pipeline");
    let trace = potential_trace(&p, &data[3]).unwrap();
    report.push("trace", ReportEntry::Series { x: (0..trace.len()).map(|i| i as f64).collect(), y: trace });
    out.push(report.to_csv().into_bytes());
    out
}

fn determinism() -> Outcome {
    let t0 = Instant::now();
    let (a, b) = (pipeline_bytes(), pipeline_bytes());
    let bytes: usize = a.iter().map(|x| x.len()).sum();
    let secs = t0.elapsed().as_secs_f64();
    outcome(a == b, format!("{} artifacts, {bytes} bytes, identical across two runs, {secs:.1}s", a.len()))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        if selected(name) {
            let o = f();
            println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((name, o));
        }
    };
    run("spectral correctness", &spectral_correctness);
    run("kdv solver oracle", &kdv_soliton);
    run("allen-cahn dissipation", &allen_cahn_dissipation);
    run("chain-continuum consistency", &chain_continuum);
    run("ad correctness", &ad_correctness);
    run("structural exactness", &structural_exactness);
    let needs_ac = ["desk allen-cahn prediction", "identifiability", "step-size bracketing"];
    if needs_ac.iter().any(|n| selected(n)) {
        let ac = train_allen_cahn();
        run("desk allen-cahn prediction", &|| ac_prediction(&ac));
        run("identifiability (dissipative)", &|| ac_identifiability(&ac));
        run("step-size bracketing", &|| ac_bracketing(&ac));
    }
    run("near-conservation (conservative)", &kdv_near_conservation);
    run("determinism", &determinism);
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
