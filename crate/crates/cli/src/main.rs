//! `meso`: data generation, training, evaluation, diagnostics and model
//! simulation driven by flags or a flat `key=value` config file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use meso_core::chain::{simulate_chain, ForceLaw, ScalingParams, DEFAULT_MICRO_SUBSTEPS};
use meso_core::checksum::crc64;
use meso_core::dataset::{
    encode_trajectory, random_initial_condition, read_trajectory, split_dataset, trajectory_seeds, IcConfig,
    Trajectory,
};
use meso_core::diagnostics::{
    affine_fit, amplitude_scan, constraint_audit, one_step_variation_scaling, pointwise_f_profile,
    potential_trace, DiagnosticsReport, ReportEntry,
};
use meso_core::onsager::{
    decode_checkpoint, encode_checkpoint, known_potential_mode, rollout, ModelConfig, ModelParameters, Structure,
};
use meso_core::pde::{free_energy, generate_pde_trajectories, PdeModel, SolverConfig, Stepper};
use meso_core::spectral::GridSpec;
use meso_core::training::{evaluate, train, TrainConfig};

const DEFAULT_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(name = "meso", version, about = "Learn Onsager-structured spectral dynamics from PDE and particle-chain data")]
struct Cli {
    /// Flat `key=value` file (`#` starts a comment); keys are flag names without dashes.
    /// Flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-trajectory work; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate a reference PDE from random initial conditions.
    GenPde(GenPde),
    /// Simulate an FPUT or FENE chain and coarse-grain it onto a grid.
    GenChain(GenChain),
    /// Fit a model to a directory of trajectories.
    Train(TrainArgs),
    /// Multi-step relative errors of a checkpoint on held-out trajectories.
    Eval(EvalArgs),
    /// Physics diagnostics of a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Roll a checkpoint forward from an initial condition.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PdeChoice {
    #[value(name = "allen-cahn-1d")]
    AllenCahn1d,
    #[value(name = "allen-cahn-2d")]
    AllenCahn2d,
    Kdv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ChainChoice {
    Fput,
    Fene,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StepperChoice {
    Sbdf1,
    Sbdf2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StructureChoice {
    General,
    Dissipative,
    Conservative,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Report {
    Potential,
    DtScaling,
    Affine,
    Amplitude,
    FProfile,
    Constraints,
}

#[derive(Args, Debug)]
struct IcArgs {
    /// Sinusoids per initial condition.
    #[arg(long, default_value_t = 5)]
    n_waves: usize,
    /// Largest wavenumber drawn.
    #[arg(long, default_value_t = 8)]
    max_wavenumber: usize,
    /// Initial conditions are rescaled to this max |u|.
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
}

impl IcArgs {
    fn config(&self) -> IcConfig {
        IcConfig {
            n_waves: self.n_waves,
            max_wavenumber: self.max_wavenumber,
            target_amp: self.amplitude,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct GenPde {
    #[arg(long, value_enum)]
    model: PdeChoice,
    #[arg(long, default_value_t = 1)]
    n_traj: usize,
    /// Falls back to MESO_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Points per axis; 256 in 1D, 128 in 2D.
    #[arg(long)]
    n_points: Option<usize>,
    /// Domain period; 1 for Allen-Cahn, 2 pi for KdV.
    #[arg(long)]
    length: Option<f64>,
    /// Recording interval.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 25)]
    substeps: usize,
    #[arg(long, default_value_t = 100)]
    snapshots: usize,
    #[arg(long, value_enum, default_value_t = StepperChoice::Sbdf2)]
    stepper: StepperChoice,
    /// Allen-Cahn interface width.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// KdV nonlinear coefficient in `u_t + a u u_x + b u_xxx = 0`.
    #[arg(long, default_value_t = 6.0)]
    kdv_a: f64,
    /// KdV dispersion coefficient.
    #[arg(long, default_value_t = 1.0)]
    kdv_b: f64,
    /// Apply the 2/3 rule to the nonlinear term.
    #[arg(long)]
    dealias: bool,
    #[command(flatten)]
    ic: IcArgs,
}

#[derive(Args, Debug)]
struct GenChain {
    #[arg(long, value_enum)]
    model: ChainChoice,
    /// Lattice spacing in macroscopic units; 0.05 for FPUT, 0.03 for FENE.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1)]
    n_traj: usize,
    /// Falls back to MESO_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Points of the reconstruction grid.
    #[arg(long, default_value_t = 256)]
    n_points: usize,
    #[arg(long, default_value_t = 1.0)]
    length: f64,
    /// Recording interval in slow time.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Velocity-Verlet steps per recorded interval.
    #[arg(long, default_value_t = DEFAULT_MICRO_SUBSTEPS)]
    substeps: usize,
    #[arg(long, default_value_t = 100)]
    snapshots: usize,
    /// FPUT linear spring constant c.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// FPUT quadratic coefficient.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// FENE stiffness H.
    #[arg(long, default_value_t = 1.0)]
    fene_h: f64,
    /// FENE maximum extension; 50 epsilon^2 when omitted.
    #[arg(long)]
    fene_r: Option<f64>,
    #[command(flatten)]
    ic: IcArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of trajectory files.
    #[arg(long)]
    data: PathBuf,
    /// Validation trajectories; when omitted, `--val-fraction` of `--data` is held out.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 3)]
    k_steps: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Falls back to MESO_SEED, then 0. Seeds the split, the initialisation and the batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    /// Adam updates.
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Windows per update; 0 is full batch.
    #[arg(long, default_value_t = 0)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    validation_every: usize,
    #[arg(long, default_value_t = 300)]
    patience: usize,
    #[arg(long, default_value_t = 5)]
    early_stop: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Highest mode seen by the multiplier and residual networks.
    #[arg(long, default_value_t = 16)]
    cutoff: usize,
    #[arg(long, value_enum, default_value_t = StructureChoice::General)]
    structure: StructureChoice,
    /// Use the analytic potential of the data's PDE and learn only the multipliers.
    #[arg(long)]
    known_potential: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    report: Report,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Steps per state audited by the constraints report.
    #[arg(long, default_value_t = 5)]
    audit_steps: usize,
    /// Largest amplitude of the amplitude scan.
    #[arg(long, default_value_t = 2.0)]
    max_amplitude: f64,
    /// Points in the amplitude scan and F profile.
    #[arg(long, default_value_t = 41)]
    points: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectory file whose first snapshot is the initial condition.
    #[arg(long)]
    ic: PathBuf,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// Errors that are the caller's fault and exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> Box<dyn std::error::Error + Send + Sync> {
    Box::new(Usage(msg.into()))
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let matches = match parse(args) {
        Ok(m) => m,
        Err(ParseError::Clap(e)) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
        Err(ParseError::Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let resolved = resolved_config(&matches);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli, resolved)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}

enum ParseError {
    Clap(clap::Error),
    Usage(String),
}

/// Parses the command line, then appends `--key value` for every config-file
/// entry the command line did not set and parses again. The first pass is
/// lenient because required flags may come from the file.
fn parse(args: Vec<OsString>) -> Result<ArgMatches, ParseError> {
    let first = Cli::command().ignore_errors(true).try_get_matches_from(&args).map_err(ParseError::Clap)?;
    let (Some(path), Some(_)) = (first.get_one::<PathBuf>("config"), first.subcommand()) else {
        return Cli::command().try_get_matches_from(args).map_err(ParseError::Clap);
    };
    let text = fs::read_to_string(path).map_err(|e| ParseError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let entries = parse_config(&text).map_err(ParseError::Usage)?;
    let (name, sub) = first.subcommand().expect("subcommand is required");
    let cmd = Cli::command();
    let sub_cmd = cmd.find_subcommand(name).expect("known subcommand");
    let known: BTreeMap<String, bool> = sub_cmd
        .get_arguments()
        .chain(cmd.get_arguments())
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .collect();
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let takes_value = match known.get(&key) {
            Some(t) if key != "config" => *t,
            _ => return Err(ParseError::Usage(format!("unknown config key `{key}` for `{name}`"))),
        };
        let id = key.replace('-', "_");
        let on_cli = [sub, &first].iter().any(|m| {
            m.try_get_raw(&id).ok().flatten().is_some()
                && m.value_source(&id) == Some(clap::parser::ValueSource::CommandLine)
        });
        if on_cli {
            continue;
        }
        if takes_value {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                other => return Err(ParseError::Usage(format!("config key `{key}` expects true or false, got `{other}`"))),
            }
        }
    }
    let mut merged = args;
    merged.extend(extra);
    Cli::command().try_get_matches_from(merged).map_err(ParseError::Clap)
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped, keys may repeat only once.
fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got `{line}`", i + 1))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        if out.iter().any(|(e, _)| *e == k) {
            return Err(format!("config line {}: duplicate key `{k}`", i + 1));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Every argument of the chosen subcommand with its effective value, as `key=value` lines.
fn resolved_config(matches: &ArgMatches) -> BTreeMap<String, String> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = Cli::command();
    let mut out = BTreeMap::new();
    out.insert("command".to_string(), name.to_string());
    for arg in cmd.find_subcommand(name).expect("known subcommand").get_arguments() {
        let (Some(long), id) = (arg.get_long(), arg.get_id().as_str()) else {
            continue;
        };
        if arg.get_action().takes_values() {
            if let Ok(Some(vals)) = sub.try_get_raw(id) {
                let joined: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
                out.insert(long.to_string(), joined.join(","));
            }
        } else {
            out.insert(long.to_string(), sub.get_flag(id).to_string());
        }
    }
    out
}

fn resolve_seed(seed: Option<u64>) -> AnyResult<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var("MESO_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("MESO_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn run(cli: Cli, mut resolved: BTreeMap<String, String>) -> AnyResult<()> {
    match cli.cmd {
        Cmd::GenPde(a) => {
            let seed = resolve_seed(a.seed)?;
            resolved.insert("seed".into(), seed.to_string());
            gen_pde(&a, seed, &resolved)
        }
        Cmd::GenChain(a) => {
            let seed = resolve_seed(a.seed)?;
            resolved.insert("seed".into(), seed.to_string());
            gen_chain(&a, seed, &resolved)
        }
        Cmd::Train(a) => {
            let seed = resolve_seed(a.seed)?;
            resolved.insert("seed".into(), seed.to_string());
            cmd_train(&a, seed, &resolved)
        }
        Cmd::Eval(a) => cmd_eval(&a, &resolved),
        Cmd::Diagnose(a) => cmd_diagnose(&a, &resolved),
        Cmd::Simulate(a) => cmd_simulate(&a, &resolved),
    }
}

fn config_text(resolved: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in resolved {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

/// Writes `files` into `dir` with `config.txt` and a `manifest.txt` of CRC-64 checksums.
fn write_dir(dir: &Path, files: Vec<(String, Vec<u8>)>, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    fs::create_dir_all(dir)?;
    let mut all = files;
    all.push(("config.txt".into(), config_text(resolved).into_bytes()));
    let mut manifest = String::new();
    for (name, bytes) in &all {
        fs::write(dir.join(name), bytes)?;
        let _ = writeln!(manifest, "{:016x}  {:>10}  {name}", crc64(bytes), bytes.len());
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Writes `files` (the first one at `path`, the others as `path.<suffix>`) plus
/// `path.config` and `path.manifest`.
fn write_beside(path: &Path, files: Vec<(String, Vec<u8>)>, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let sibling = |suffix: &str| -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".");
        s.push(suffix);
        PathBuf::from(s)
    };
    let mut all: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for (i, (suffix, bytes)) in files.into_iter().enumerate() {
        all.push((if i == 0 { path.to_path_buf() } else { sibling(&suffix) }, bytes));
    }
    all.push((sibling("config"), config_text(resolved).into_bytes()));
    let mut manifest = String::new();
    for (p, bytes) in &all {
        fs::write(p, bytes)?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(manifest, "{:016x}  {:>10}  {name}", crc64(bytes), bytes.len());
    }
    fs::write(sibling("manifest"), manifest)?;
    Ok(())
}

fn trajectory_files(trajs: &[Trajectory]) -> AnyResult<Vec<(String, Vec<u8>)>> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| Ok((format!("traj_{i:04}.omtraj"), encode_trajectory(t)?)))
        .collect()
}

fn gen_pde(a: &GenPde, seed: u64, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    let mut model = match a.model {
        PdeChoice::AllenCahn1d | PdeChoice::AllenCahn2d => PdeModel::allen_cahn(a.epsilon),
        PdeChoice::Kdv => PdeModel::kdv_with(a.kdv_a, a.kdv_b),
    };
    model.dealias = a.dealias;
    let length = a.length.unwrap_or(match a.model {
        PdeChoice::Kdv => 2.0 * std::f64::consts::PI,
        _ => 1.0,
    });
    let grid = match a.model {
        PdeChoice::AllenCahn2d => {
            let n = a.n_points.unwrap_or(128);
            GridSpec::new_2d(n, n, length)?
        }
        _ => GridSpec::new_1d(a.n_points.unwrap_or(256), length)?,
    };
    let sc = SolverConfig {
        dt_record: a.dt,
        substeps: a.substeps,
        n_snapshots: a.snapshots,
        stepper: match a.stepper {
            StepperChoice::Sbdf1 => Stepper::Sbdf1,
            StepperChoice::Sbdf2 => Stepper::Sbdf2,
        },
    };
    let ic = a.ic.config();
    ic.validate(&grid)?;
    let trajs = generate_pde_trajectories(&model, &grid, &ic, &sc, seed, a.n_traj)?;
    write_dir(&a.out, trajectory_files(&trajs)?, resolved)?;
    eprintln!("wrote {} {} trajectories to {}", trajs.len(), model.name(), a.out.display());
    Ok(())
}

fn gen_chain(a: &GenChain, seed: u64, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    let eps = a.epsilon.unwrap_or(match a.model {
        ChainChoice::Fput => 0.05,
        ChainChoice::Fene => 0.03,
    });
    let (law, c_wave) = match a.model {
        ChainChoice::Fput => (ForceLaw::Fput { c: a.c, alpha: a.alpha }, a.c),
        ChainChoice::Fene => (
            ForceLaw::Fene { h: a.fene_h, r_max: a.fene_r.unwrap_or(50.0 * eps * eps) },
            a.fene_h.sqrt(),
        ),
    };
    law.validate()?;
    let scaling = ScalingParams::new(eps, c_wave)?;
    let grid = GridSpec::new_1d(a.n_points, a.length)?;
    let ic = a.ic.config();
    ic.validate(&grid)?;
    let sc = SolverConfig { dt_record: a.dt, substeps: a.substeps, n_snapshots: a.snapshots, ..Default::default() };
    let n_nodes = scaling.node_count(a.length);
    let results: Vec<_> = trajectory_seeds(seed, a.n_traj)
        .into_par_iter()
        .map(|s| -> meso_core::Result<Trajectory> {
            let u0 = random_initial_condition(&IcConfig { seed: s, ..ic.clone() }, &grid)?;
            let mut t = simulate_chain(&law, &scaling, &u0, &sc, n_nodes)?;
            t.meta_mut().insert("ic_seed".into(), s.to_string());
            Ok(t)
        })
        .collect();
    let mut trajs = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        trajs.push(r.map_err(|e| format!("trajectory {i}: {e}"))?);
    }
    write_dir(&a.out, trajectory_files(&trajs)?, resolved)?;
    eprintln!("wrote {} {} trajectories ({n_nodes} nodes) to {}", trajs.len(), law.name(), a.out.display());
    Ok(())
}

/// Every `*.omtraj` file in `dir`, in file-name order.
fn load_dir(dir: &Path) -> AnyResult<Vec<Trajectory>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "omtraj"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no .omtraj files in {}", dir.display()).into());
    }
    Ok(paths.iter().map(|p| read_trajectory(p)).collect::<meso_core::Result<_>>()?)
}

/// The reference PDE recorded in trajectory metadata, if any.
fn pde_from_meta(t: &Trajectory) -> Option<PdeModel> {
    let m = t.meta();
    let num = |k: &str| m.get(k).and_then(|v| v.parse::<f64>().ok());
    match m.get("model").map(String::as_str) {
        Some("allen-cahn") => Some(PdeModel::allen_cahn(num("epsilon")?)),
        Some("kdv") => Some(PdeModel::kdv_with(num("kdv_a")?, num("kdv_b")?)),
        _ => None,
    }
}

fn cmd_train(a: &TrainArgs, seed: u64, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    let data = load_dir(&a.data)?;
    let (train_set, val_set) = match &a.val_data {
        Some(dir) => (data, load_dir(dir)?),
        None => {
            let (t, v, _) = split_dataset(data, (1.0 - a.val_fraction, a.val_fraction, 0.0), seed)?;
            (t, v)
        }
    };
    let grid = train_set[0].grid().clone();
    if grid.dim() != 1 {
        return Err(usage("training supports 1D trajectories only"));
    }
    let dt = train_set[0].dt_record();
    if train_set.iter().chain(&val_set).any(|t| t.grid() != &grid || t.dt_record() != dt) {
        return Err(usage("all trajectories must share one grid and recording interval"));
    }
    let mut mc = ModelConfig {
        width: a.width,
        depth: a.depth,
        cutoff: a.cutoff,
        structure: match a.structure {
            StructureChoice::General => Structure::General,
            StructureChoice::Dissipative => Structure::Dissipative,
            StructureChoice::Conservative => Structure::Conservative,
        },
        ..ModelConfig::new(grid.points()[0], grid.lengths()[0])
    };
    if a.known_potential {
        let pde = pde_from_meta(&train_set[0])
            .ok_or_else(|| usage("--known-potential needs PDE-generated data with model metadata"))?;
        mc = known_potential_mode(mc, pde);
    }
    let tc = TrainConfig {
        k_steps: a.k_steps,
        lr: a.lr,
        adam_eps: a.adam_eps,
        max_epochs: a.epochs,
        batch_size: (a.batch > 0).then_some(a.batch),
        validation_every: a.validation_every,
        plateau_patience_epochs: a.patience,
        early_stop_validations: a.early_stop,
        seed,
        ..Default::default()
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let init = ModelParameters::init(mc, seed)?;
    let (params, history) = train(&tc, &train_set, &val_set, init)?;
    let mut extra = BTreeMap::new();
    extra.insert("dt_record".to_string(), dt.to_string());
    extra.insert("k_steps".to_string(), a.k_steps.to_string());
    if let Some(m) = train_set[0].meta().get("model") {
        extra.insert("data_model".to_string(), m.clone());
    }
    let files = vec![
        ("ckpt".to_string(), encode_checkpoint(&params, &extra)),
        ("history.csv".to_string(), history.to_csv().into_bytes()),
    ];
    write_beside(&a.out, files, resolved)?;
    let best = history.validation.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    eprintln!(
        "trained {} parameters for {} epochs; best validation loss {best:e} at epoch {}",
        params.n_params(),
        history.epochs.len(),
        history.best_epoch
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> AnyResult<(ModelParameters, BTreeMap<String, String>, String)> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let (p, extra) = decode_checkpoint(&bytes, path)?;
    Ok((p, extra, format!("{:016x}", crc64(&bytes))))
}

fn emit(out: &Option<PathBuf>, text: String, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    match out {
        Some(path) => write_beside(path, vec![("csv".into(), text.into_bytes())], resolved),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(a: &EvalArgs, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    let (params, _, _) = load_checkpoint(&a.checkpoint)?;
    let data = load_dir(&a.data)?;
    if a.horizon == 0 {
        return Err(usage("--horizon must be positive"));
    }
    let report = evaluate(&params, &data, a.horizon)?;
    emit(&a.out, report.to_csv(), resolved)?;
    eprintln!(
        "{}-step relative error {:.6} +- {:.6} over {} trajectories",
        report.summary_step,
        report.mean,
        report.std,
        data.len()
    );
    Ok(())
}

fn cmd_diagnose(a: &DiagnoseArgs, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    let (params, extra, id) = load_checkpoint(&a.checkpoint)?;
    let data = load_dir(&a.data)?;
    let seed = params.init_seed;
    let mut report = DiagnosticsReport::new(seed, id);
    let ics: Vec<_> = data.iter().map(|t| t.snapshots()[0].clone()).collect();
    let dt = extra
        .get("dt_record")
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| data[0].dt_record());
    let mut failed = false;
    match a.report {
        Report::Potential => {
            for (i, t) in data.iter().enumerate() {
                let y = potential_trace(&params, t)?;
                let x = (0..y.len()).map(|s| s as f64 * t.dt_record()).collect();
                report.push(format!("potential_{i}"), ReportEntry::Series { x, y });
            }
        }
        Report::DtScaling => {
            let dts: Vec<f64> = [0.1, 0.2, 0.3, 0.5, 0.7, 1.0].iter().map(|f| f * dt).collect();
            let s = one_step_variation_scaling(&params, &ics, &dts)?;
            report.push("median_variation", ReportEntry::Series { x: dts, y: s.median_variation.clone() });
            report.push("loglog_fit", ReportEntry::Fit(s.fit));
            report.push("excluded_states", ReportEntry::Scalar(s.excluded as f64));
            eprintln!("one-step variation exponent {:.4} (R^2 {:.4})", s.exponent(), s.fit.r2);
        }
        Report::Affine => {
            let pde = pde_from_meta(&data[0]).ok_or_else(|| usage("affine report needs PDE-generated data"))?;
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for t in &data {
                xs.extend(t.snapshots().iter().map(|s| free_energy(&pde, s)));
                ys.extend(potential_trace(&params, t)?);
            }
            let fit = affine_fit(&xs, &ys)?;
            report.push("reference_vs_learned", ReportEntry::Series { x: xs, y: ys });
            report.push("affine_fit", ReportEntry::Fit(fit));
            eprintln!("affine fit slope {:e} intercept {:e} R^2 {:.4}", fit.slope, fit.intercept, fit.r2);
        }
        Report::Amplitude => {
            let n = a.points.max(2);
            let amps: Vec<f64> = (0..n).map(|i| a.max_amplitude * i as f64 / (n - 1) as f64).collect();
            let scan = amplitude_scan(&params, &ics[0], &amps)?;
            report.push("v0", ReportEntry::Series { x: amps.clone(), y: scan.v0.clone() });
            report.push("v2", ReportEntry::Series { x: amps, y: scan.v2.clone() });
            if let Some(f) = scan.v0_fit {
                report.push("v0_loglog_fit", ReportEntry::Fit(f));
            }
            report.push("dynamic_range_ratio", ReportEntry::Scalar(scan.dynamic_range_ratio()));
        }
        Report::FProfile => {
            let (lo, hi) = data
                .iter()
                .flat_map(|t| t.snapshots())
                .flat_map(|s| s.values().iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            let (u, f) = pointwise_f_profile(&params, lo, hi, a.points.max(2))?;
            report.push("f_profile", ReportEntry::Series { x: u, y: f });
        }
        Report::Constraints => {
            let audit = constraint_audit(&params, &ics, a.audit_steps, dt)?;
            report.push("states", ReportEntry::Scalar(audit.states as f64));
            report.push("violations", ReportEntry::Scalar(audit.violations.len() as f64));
            report.push("max_leakage", ReportEntry::Scalar(audit.max_leakage));
            report.push("max_projected", ReportEntry::Scalar(audit.max_projected));
            for v in audit.violations.iter().take(10) {
                eprintln!("violation: {v:?}");
            }
            failed = !audit.passed();
            eprintln!("constraints: {}", if failed { "FAIL" } else { "pass" });
        }
    }
    emit(&a.out, report.to_csv(), resolved)?;
    if failed {
        return Err("constraint audit failed".into());
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, resolved: &BTreeMap<String, String>) -> AnyResult<()> {
    let (params, _, id) = load_checkpoint(&a.checkpoint)?;
    if !(a.dt > 0.0) {
        return Err(usage("--dt must be positive"));
    }
    let ic = read_trajectory(&a.ic)?;
    let u0 = &ic.snapshots()[0];
    if u0.grid() != &params.config.grid() {
        return Err(usage("initial condition grid does not match the checkpoint"));
    }
    let snaps = rollout(&params, u0, a.dt, a.steps)?;
    if snaps.len() < 2 {
        return Err(usage("--steps must be at least 1"));
    }
    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), "learned".to_string());
    meta.insert("checkpoint".to_string(), id);
    let traj = Trajectory::new(snaps, a.dt, meta)?;
    write_beside(&a.out, vec![("omtraj".into(), encode_trajectory(&traj)?)], resolved)?;
    eprintln!("wrote {} snapshots to {}", traj.len(), a.out.display());
    Ok(())
}
