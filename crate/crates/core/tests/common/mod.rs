//! Finite-difference oracles shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use meso_core::autodiff::{mlp_forward, Mat, Tape, Var};
use meso_core::dataset::{random_initial_condition, IcConfig, Trajectory};
use meso_core::onsager::{learned_potential, mu_hat_eval, pack_half, Graph, ModelConfig, ModelParameters};
use meso_core::pde::{simulate_pde, PdeModel, SolverConfig};
use meso_core::rng::SplitMix64;
use meso_core::spectral::{forward_transform, inverse_transform, GridSpec, RealGridField};
use meso_core::training::{k_step_loss, k_step_loss_grad};

pub type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

pub fn random_mat(rng: &mut SplitMix64, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
    Mat::new(r, c, (0..r * c).map(|_| rng.uniform_in(lo, hi)).collect())
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// `sum(w * y)` with fixed weights, so every output entry is exercised.
pub fn linear_readout<'t>(t: &'t Tape, y: Var<'t>) -> Var<'t> {
    let (r, c) = y.shape();
    let mut rng = SplitMix64::new(991 + (r * 31 + c) as u64);
    (y * t.var(random_mat(&mut rng, r, c, -1.0, 1.0))).sum()
}

/// `sum(w * y^2)`; curved in `y`, so linear primitives get a nonzero Hessian.
pub fn quadratic_readout<'t>(t: &'t Tape, y: Var<'t>) -> Var<'t> {
    let (r, c) = y.shape();
    let mut rng = SplitMix64::new(577 + (r * 31 + c) as u64);
    (y * y * t.var(random_mat(&mut rng, r, c, -1.0, 1.0))).sum()
}

pub fn scalar_value(build: Build, inputs: &[Mat], readout: for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>) -> f64 {
    let t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|m| t.var(m.clone())).collect();
    readout(&t, build(&t, &v)).item()
}

pub fn analytic_grad(build: Build, inputs: &[Mat], readout: for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>) -> Vec<Vec<f64>> {
    let t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|m| t.var(m.clone())).collect();
    let s = readout(&t, build(&t, &v));
    t.gradient(s, &v).unwrap().iter().map(|g| g.value().data.clone()).collect()
}

pub fn fd_grad(build: Build, inputs: &[Mat], readout: for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>, h: f64) -> Vec<Vec<f64>> {
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].len())
                .map(|j| {
                    let mut plus = inputs.to_vec();
                    let mut minus = inputs.to_vec();
                    plus[i].data[j] += h;
                    minus[i].data[j] -= h;
                    (scalar_value(build, &plus, readout) - scalar_value(build, &minus, readout)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Hessian of the quadratic readout applied to `dir`, via gradient of gradient.
pub fn analytic_hvp(build: Build, inputs: &[Mat], dir: &[Mat]) -> Vec<Vec<f64>> {
    let t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|m| t.var(m.clone())).collect();
    let s = quadratic_readout(&t, build(&t, &v));
    let g = t.gradient(s, &v).unwrap();
    let mut gv = (g[0] * t.var(dir[0].clone())).sum();
    for i in 1..g.len() {
        gv = gv + (g[i] * t.var(dir[i].clone())).sum();
    }
    t.gradient(gv, &v).unwrap().iter().map(|g| g.value().data.clone()).collect()
}

pub fn fd_hvp(build: Build, inputs: &[Mat], dir: &[Mat], h: f64) -> Vec<Vec<f64>> {
    let shifted = |sign: f64| -> Vec<Mat> {
        inputs.iter().zip(dir).map(|(x, d)| x.zip_map(d, |a, b| a + sign * h * b)).collect()
    };
    let gp = analytic_grad(build, &shifted(1.0), quadratic_readout);
    let gm = analytic_grad(build, &shifted(-1.0), quadratic_readout);
    gp.iter()
        .zip(&gm)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) / (2.0 * h)).collect())
        .collect()
}

pub struct Case {
    pub name: &'static str,
    pub shapes: &'static [(usize, usize)],
    /// Inputs are drawn from this interval.
    pub range: (f64, f64),
    pub build: Build,
}

pub fn cases() -> Vec<Case> {
    const G: (f64, f64) = (-1.5, 1.5);
    vec![
        Case { name: "add", shapes: &[(3, 4), (3, 4)], range: G, build: |_, v| v[0] + v[1] },
        Case { name: "sub", shapes: &[(3, 4), (3, 4)], range: G, build: |_, v| v[0] - v[1] },
        Case { name: "mul", shapes: &[(3, 4), (3, 4)], range: G, build: |_, v| v[0] * v[1] },
        Case { name: "neg", shapes: &[(2, 5)], range: G, build: |_, v| -v[0] },
        Case { name: "scale", shapes: &[(2, 5)], range: G, build: |_, v| v[0].scale(-2.5) },
        Case { name: "add_const", shapes: &[(2, 5)], range: G, build: |_, v| v[0].add_const(0.75) },
        Case { name: "mul_scalar", shapes: &[(3, 4), (1, 1)], range: G, build: |_, v| v[0].mul_scalar(v[1]) },
        Case { name: "add_row", shapes: &[(3, 4), (1, 4)], range: G, build: |_, v| v[0].add_row(v[1]) },
        Case { name: "mul_row", shapes: &[(3, 4), (1, 4)], range: G, build: |_, v| v[0].mul_row(v[1]) },
        Case { name: "mul_col", shapes: &[(3, 4), (3, 1)], range: G, build: |_, v| v[0].mul_col(v[1]) },
        Case { name: "matmul", shapes: &[(3, 4), (4, 2)], range: G, build: |_, v| v[0].matmul(v[1]) },
        Case { name: "matmul_nt", shapes: &[(3, 4), (2, 4)], range: G, build: |_, v| v[0].matmul_nt(v[1]) },
        Case { name: "matmul_tn", shapes: &[(4, 3), (4, 2)], range: G, build: |_, v| v[0].matmul_tn(v[1]) },
        Case { name: "sin", shapes: &[(2, 5)], range: G, build: |_, v| v[0].sin() },
        Case { name: "cos", shapes: &[(2, 5)], range: G, build: |_, v| v[0].cos() },
        Case { name: "exp", shapes: &[(2, 5)], range: G, build: |_, v| v[0].exp() },
        Case { name: "tanh", shapes: &[(2, 5)], range: G, build: |_, v| v[0].tanh() },
        Case { name: "sigmoid", shapes: &[(2, 5)], range: (-4.0, 4.0), build: |_, v| v[0].sigmoid() },
        Case { name: "softplus", shapes: &[(2, 5)], range: (-4.0, 4.0), build: |_, v| v[0].softplus() },
        Case { name: "silu", shapes: &[(2, 5)], range: (-4.0, 4.0), build: |_, v| v[0].silu() },
        Case { name: "silu_grad", shapes: &[(2, 5)], range: (-4.0, 4.0), build: |_, v| v[0].silu_grad() },
        Case { name: "silu_grad2", shapes: &[(2, 5)], range: (-4.0, 4.0), build: |_, v| v[0].silu_grad2() },
        Case { name: "square", shapes: &[(2, 5)], range: G, build: |_, v| v[0].square() },
        Case { name: "sum", shapes: &[(3, 4)], range: G, build: |_, v| v[0].sum() },
        Case { name: "sum_rows", shapes: &[(3, 4)], range: G, build: |_, v| v[0].sum_rows() },
        Case { name: "sum_cols", shapes: &[(3, 4)], range: G, build: |_, v| v[0].sum_cols() },
        Case { name: "broadcast_rows", shapes: &[(1, 4)], range: G, build: |_, v| v[0].broadcast_rows(3) },
        Case { name: "broadcast_cols", shapes: &[(3, 1)], range: G, build: |_, v| v[0].broadcast_cols(4) },
        Case { name: "broadcast_scalar", shapes: &[(1, 1)], range: G, build: |_, v| v[0].broadcast_scalar(2, 3) },
        Case { name: "reshape", shapes: &[(3, 4)], range: G, build: |_, v| v[0].reshape(2, 6) },
        Case { name: "slice_cols", shapes: &[(3, 6)], range: G, build: |_, v| v[0].slice_cols(1, 3) },
        Case { name: "pad_cols", shapes: &[(3, 2)], range: G, build: |_, v| v[0].pad_cols(2, 5) },
        Case { name: "concat_cols", shapes: &[(2, 3), (2, 1), (2, 2)], range: G, build: |t, v| t.concat_cols(v) },
        Case { name: "rfft", shapes: &[(2, 8)], range: G, build: |_, v| v[0].rfft() },
        Case { name: "rfft_adj", shapes: &[(2, 10)], range: G, build: |_, v| v[0].rfft_adj() },
        Case { name: "irfft", shapes: &[(2, 10)], range: G, build: |_, v| v[0].irfft() },
        Case { name: "irfft_adj", shapes: &[(2, 8)], range: G, build: |_, v| v[0].irfft_adj() },
    ]
}

fn case_inputs(case: &Case, seed: u64) -> (Vec<Mat>, SplitMix64) {
    let mut rng = SplitMix64::new(seed + case.name.len() as u64);
    let inputs = case.shapes.iter().map(|&(r, c)| random_mat(&mut rng, r, c, case.range.0, case.range.1)).collect();
    (inputs, rng)
}

/// Worst relative gradient error over every primitive at 10 random points each.
pub fn worst_first_order() -> (f64, &'static str) {
    let mut worst = (0.0, "");
    for case in cases() {
        for point in 0..10u64 {
            let (inputs, _) = case_inputs(&case, 1000 * point);
            let a = analytic_grad(case.build, &inputs, linear_readout);
            let f = fd_grad(case.build, &inputs, linear_readout, 1e-5);
            for (ai, fi) in a.iter().zip(&f) {
                let e = rel_err(ai, fi);
                if e > worst.0 {
                    worst = (e, case.name);
                }
            }
        }
    }
    worst
}

/// Worst relative Hessian-vector error over every primitive at 3 random points each.
pub fn worst_double_backward() -> (f64, &'static str) {
    let mut worst = (0.0, "");
    for case in cases() {
        for point in 0..3u64 {
            let (inputs, mut rng) = case_inputs(&case, 7000 + 100 * point);
            let dir: Vec<Mat> = case.shapes.iter().map(|&(r, c)| random_mat(&mut rng, r, c, -1.0, 1.0)).collect();
            let a = analytic_hvp(case.build, &inputs, &dir);
            let f = fd_hvp(case.build, &inputs, &dir, 1e-5);
            for (ai, fi) in a.iter().zip(&f) {
                let e = rel_err(ai, fi);
                if e > worst.0 {
                    worst = (e, case.name);
                }
            }
        }
    }
    worst
}

/// Every parameter perturbed, so `W`, `F` and `v` all contribute.
pub fn perturbed_model(cfg: ModelConfig, seed: u64, noise: f64) -> ModelParameters {
    let mut p = ModelParameters::init(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let flat: Vec<f64> = p.flatten().iter().map(|v| v + noise * rng.uniform_in(-1.0, 1.0)).collect();
    p.set_flat(&flat).unwrap();
    p.raw_alpha = rng.uniform_in(-1.0, 1.0);
    p.raw_beta = rng.uniform_in(-3.0, -1.0);
    p
}

pub fn field(grid: &GridSpec, seed: u64, kmax: usize, amp: f64) -> RealGridField {
    let cfg = IcConfig { seed, max_wavenumber: kmax, target_amp: amp, ..Default::default() };
    random_initial_condition(&cfg, grid).unwrap()
}

pub fn axpy(u: &RealGridField, a: f64, d: &RealGridField) -> RealGridField {
    let v = u.values().iter().zip(d.values()).map(|(x, y)| x + a * y).collect();
    RealGridField::new(u.grid().clone(), v).unwrap()
}

/// Worst relative gap between `<mu, du>` and the central difference of `V` over 20 random pairs.
pub fn worst_functional_derivative() -> f64 {
    let cfg = ModelConfig { width: 16, depth: 2, cutoff: 8, ..ModelConfig::new(32, 1.0) };
    let grid = cfg.grid();
    let mut worst: f64 = 0.0;
    for pair in 0..20u64 {
        let p = perturbed_model(cfg.clone(), pair, 0.05);
        let u = field(&grid, 100 + pair, 10, 0.9);
        // Odd pairs perturb above the cutoff, where only V0 and V1 see it.
        let du = field(&grid, 200 + pair, if pair % 2 == 0 { 6 } else { 15 }, 1.0);
        let mu = inverse_transform(&mu_hat_eval(&p, &u).unwrap()).unwrap();
        let directional: f64 =
            grid.cell_volume() * mu.values().iter().zip(du.values()).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-5;
        let vp = learned_potential(&p, &axpy(&u, h, &du)).unwrap().total();
        let vm = learned_potential(&p, &axpy(&u, -h, &du)).unwrap().total();
        let fd = (vp - vm) / (2.0 * h);
        worst = worst.max((directional - fd).abs() / fd.abs().max(1e-12));
    }
    worst
}

/// Relative error of the Hessian-vector product of `v` taken through its own input gradient.
pub fn v_gradient_hvp_error() -> f64 {
    let cfg = ModelConfig { width: 16, depth: 3, cutoff: 8, ..ModelConfig::new(32, 1.0) };
    let p = perturbed_model(cfg.clone(), 4, 0.05);
    let u = field(&cfg.grid(), 3, 8, 1.0);
    let packed = pack_half(&[&forward_transform(&u).unwrap()]);
    let mut rng = SplitMix64::new(12);
    let dir = random_mat(&mut rng, 1, cfg.n_features(), -1.0, 1.0);
    let grad_at = |z: &Mat| -> Vec<f64> {
        let t = Tape::new();
        let g = Graph::new(&t, &p);
        let zv = t.var(z.clone());
        let v = mlp_forward(&cfg.v_spec(), &g.vars.phi_v, zv).sum();
        t.gradient(v, &[zv]).unwrap()[0].value().data.clone()
    };
    let t = Tape::new();
    let g = Graph::new(&t, &p);
    let z = g.features(t.var(packed)).value();
    let zv = t.var((*z).clone());
    let grad = t.gradient(mlp_forward(&cfg.v_spec(), &g.vars.phi_v, zv).sum(), &[zv]).unwrap()[0];
    let hv = t.gradient((grad * t.var(dir.clone())).sum(), &[zv]).unwrap()[0].value().data.clone();
    let h = 1e-5;
    let gp = grad_at(&z.zip_map(&dir, |a, b| a + h * b));
    let gm = grad_at(&z.zip_map(&dir, |a, b| a - h * b));
    let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    rel_err(&hv, &fd)
}

/// Width-8 model with every parameter perturbed and a 5-snapshot Allen-Cahn trajectory.
pub fn tiny_setup() -> (ModelParameters, Trajectory) {
    let cfg = ModelConfig { width: 8, depth: 2, cutoff: 4, ..ModelConfig::new(16, 1.0) };
    let p = perturbed_model(cfg.clone(), 21, 0.1);
    let ic = field(&cfg.grid(), 5, 4, 0.9);
    let sc = SolverConfig { n_snapshots: 5, ..SolverConfig::default() };
    let traj = simulate_pde(&PdeModel::allen_cahn(0.1), &ic, &sc).unwrap();
    (p, traj)
}

/// Relative error of the 3-step loss gradient per parameter group, on up to 12 sampled entries each.
pub fn loss_gradient_errors() -> Vec<(&'static str, f64)> {
    let (p, traj) = tiny_setup();
    let k = 3;
    let (_, grad) = k_step_loss_grad(&p, &traj, k).unwrap();
    let flat = p.flatten();
    let loss_at = |flat: &[f64]| {
        let mut q = p.clone();
        q.set_flat(flat).unwrap();
        k_step_loss(&q, &traj, k).unwrap()
    };
    let sizes = [
        ("psi", p.psi.iter().map(|m| m.len()).sum::<usize>()),
        ("phi_f", p.phi_f.iter().map(|m| m.len()).sum()),
        ("phi_v", p.phi_v.iter().map(|m| m.len()).sum()),
        ("raw_alpha", 1),
        ("raw_beta", 1),
    ];
    assert_eq!(sizes.iter().map(|s| s.1).sum::<usize>(), flat.len());
    let mut off = 0;
    let mut rng = SplitMix64::new(77);
    let mut out = Vec::new();
    for (name, n) in sizes {
        let picks: Vec<usize> = if n <= 12 {
            (off..off + n).collect()
        } else {
            (0..12).map(|_| off + rng.below(n as u64) as usize).collect()
        };
        let h = 1e-5;
        let fd: Vec<f64> = picks
            .iter()
            .map(|&i| {
                let mut a = flat.clone();
                let mut b = flat.clone();
                a[i] += h;
                b[i] -= h;
                (loss_at(&a) - loss_at(&b)) / (2.0 * h)
            })
            .collect();
        let an: Vec<f64> = picks.iter().map(|&i| grad[i]).collect();
        out.push((name, rel_err(&an, &fd)));
        off += n;
    }
    out
}
