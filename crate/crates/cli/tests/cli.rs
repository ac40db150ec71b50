use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn meso(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meso"))
        .current_dir(dir)
        .env_remove("MESO_SEED")
        .args(args)
        .output()
        .expect("spawn meso")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = meso(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn header(path: &Path) -> String {
    let bytes = fs::read(path).unwrap();
    let end = bytes.iter().position(|&b| b == b'\n').unwrap();
    String::from_utf8(bytes[..end].to_vec()).unwrap()
}

const SMALL_AC: &[&str] = &[
    "gen-pde", "--model", "allen-cahn-1d", "--n-traj", "4", "--n-points", "32", "--max-wavenumber", "4",
    "--snapshots", "12",
];

#[test]
fn kdv_defaults_record_one_hundred_snapshots() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["gen-pde", "--model", "kdv", "--n-points", "64", "--max-wavenumber", "3", "--out", "d"]);
    let h = header(&tmp.path().join("d/traj_0000.omtraj"));
    assert!(h.contains(" snaps=100 ") && h.contains(" dt=0.001 "), "{h}");
    assert!(h.contains("model=kdv"));
    let manifest = fs::read_to_string(tmp.path().join("d/manifest.txt")).unwrap();
    assert!(manifest.contains("traj_0000.omtraj") && manifest.contains("config.txt"));
}

#[test]
fn generation_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let mut a: Vec<&str> = SMALL_AC.to_vec();
    a.extend(["--seed", "3", "--out", "a"]);
    let mut b: Vec<&str> = vec!["--jobs", "4"];
    b.extend(SMALL_AC);
    b.extend(["--seed", "3", "--out", "b"]);
    ok(tmp.path(), &a);
    ok(tmp.path(), &b);
    for i in 0..4 {
        let name = format!("traj_{i:04}.omtraj");
        assert_eq!(fs::read(tmp.path().join("a").join(&name)).unwrap(), fs::read(tmp.path().join("b").join(&name)).unwrap());
    }
}

#[test]
fn invalid_model_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(meso(tmp.path(), &["gen-pde", "--model", "burgers", "--out", "d"]).status.code(), Some(2));
    assert_eq!(meso(tmp.path(), &["gen-chain", "--model", "toda", "--out", "d"]).status.code(), Some(2));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn chain_metadata_names_the_force_law() {
    let tmp = TempDir::new().unwrap();
    for law in ["fput", "fene"] {
        ok(tmp.path(), &[
            "gen-chain", "--model", law, "--n-points", "64", "--max-wavenumber", "2", "--snapshots", "3", "--out", law,
        ]);
        let h = header(&tmp.path().join(law).join("traj_0000.omtraj"));
        assert!(h.contains(&format!("model={law}")), "{h}");
    }
}

#[test]
fn config_file_supplies_values_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.cfg"), "# small run\nmodel = kdv\nn-points = 32\nmax-wavenumber=3\nsnapshots = 7\nseed = 5\n")
        .unwrap();
    ok(tmp.path(), &["--config", "run.cfg", "gen-pde", "--snapshots", "4", "--out", "d"]);
    let h = header(&tmp.path().join("d/traj_0000.omtraj"));
    assert!(h.contains(" nx=32 ") && h.contains(" snaps=4 "), "{h}");
    let resolved = fs::read_to_string(tmp.path().join("d/config.txt")).unwrap();
    assert!(resolved.contains("seed=5\n") && resolved.contains("snapshots=4\n"));

    fs::write(tmp.path().join("bad.cfg"), "model=kdv\nwavelets=3\n").unwrap();
    let out = meso(tmp.path(), &["--config", "bad.cfg", "gen-pde", "--out", "e"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wavelets"));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let args = ["gen-pde", "--model", "kdv", "--n-points", "32", "--max-wavenumber", "3", "--snapshots", "3"];
    let run = |out: &str, env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_meso"));
        cmd.current_dir(tmp.path()).env_remove("MESO_SEED").args(args).args(extra).args(["--out", out]);
        if let Some(v) = env {
            cmd.env("MESO_SEED", v);
        }
        assert!(cmd.status().unwrap().success());
        fs::read(tmp.path().join(out).join("traj_0000.omtraj")).unwrap()
    };
    let from_env = run("env", Some("11"), &[]);
    assert_eq!(from_env, run("flag", None, &["--seed", "11"]));
    assert_ne!(from_env, run("default", None, &[]));
    assert_eq!(run("both", Some("11"), &["--seed", "0"]), run("zero", None, &[]));
}

#[test]
fn train_eval_diagnose_simulate_round_trip() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut gen: Vec<&str> = SMALL_AC.to_vec();
    gen.extend(["--out", "data"]);
    ok(dir, &gen);
    let train = [
        "train", "--data", "data", "--out", "m/ckpt", "--width", "8", "--depth", "2", "--cutoff", "6", "--epochs", "10",
        "--lr", "1e-2", "--val-fraction", "0.25", "--structure", "dissipative",
    ];
    ok(dir, &train);
    let first = fs::read(dir.join("m/ckpt")).unwrap();
    ok(dir, &train);
    assert_eq!(first, fs::read(dir.join("m/ckpt")).unwrap(), "training is not deterministic");
    assert!(fs::read_to_string(dir.join("m/ckpt.history.csv")).unwrap().starts_with("epoch,"));

    let eval = ok(dir, &["eval", "--checkpoint", "m/ckpt", "--data", "data", "--horizon", "3"]);
    let csv = String::from_utf8(eval.stdout).unwrap();
    // Header, 4 trajectories x 3 steps, then a mean and a std row per step.
    assert_eq!(csv.lines().count(), 1 + 4 * 3 + 2 * 3);

    let audit = ok(dir, &["diagnose", "--checkpoint", "m/ckpt", "--data", "data", "--report", "constraints"]);
    let report = String::from_utf8(audit.stdout).unwrap();
    assert!(report.lines().any(|l| l.starts_with("violations,scalar,,0e0,")), "{report}");
    for kind in ["potential", "dt-scaling", "affine", "amplitude", "f-profile"] {
        ok(dir, &["diagnose", "--checkpoint", "m/ckpt", "--data", "data", "--report", kind, "--out", &format!("r/{kind}.csv")]);
        assert!(dir.join(format!("r/{kind}.csv.manifest")).exists());
    }

    ok(dir, &["simulate", "--checkpoint", "m/ckpt", "--ic", "data/traj_0000.omtraj", "--dt", "1e-3", "--steps", "5", "--out", "sim.omtraj"]);
    assert!(header(&dir.join("sim.omtraj")).contains(" snaps=6 "));
}

#[test]
fn checkpoint_scores_zero_on_its_own_rollouts() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut gen: Vec<&str> = SMALL_AC.to_vec();
    gen.extend(["--out", "data"]);
    ok(dir, &gen);
    ok(dir, &["train", "--data", "data", "--out", "ckpt", "--width", "8", "--depth", "2", "--cutoff", "6", "--epochs", "2"]);
    fs::create_dir(dir.join("self")).unwrap();
    for i in 0..2 {
        let ic = format!("data/traj_{i:04}.omtraj");
        let out = format!("self/traj_{i:04}.omtraj");
        ok(dir, &["simulate", "--checkpoint", "ckpt", "--ic", &ic, "--dt", "1e-3", "--steps", "8", "--out", &out]);
    }
    let eval = ok(dir, &["eval", "--checkpoint", "ckpt", "--data", "self", "--horizon", "5"]);
    for line in String::from_utf8(eval.stdout).unwrap().lines().skip(1) {
        let err: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err < 1e-12, "{line}");
    }
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let tmp = TempDir::new().unwrap();
    let out = meso(tmp.path(), &["eval", "--checkpoint", "nope", "--data", "."]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
