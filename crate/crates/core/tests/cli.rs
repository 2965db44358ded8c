use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointbirth::cli::{parse_config, Experiment, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pointbirth"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    bin()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn minimal_config_parses_with_defaults() {
    let cfg = parse_config(r#"{"model": {"d": 2}}"#).unwrap();
    let p = cfg.model.params();
    assert_eq!((p.d, p.alpha, p.beta, p.eta), (2, 0.0, 1.0, 1.0));
    let resolved = cfg.resolved(Experiment::Solve);
    let back: RunConfig = serde_json::from_str(&serde_json::to_string(&resolved).unwrap()).unwrap();
    assert_eq!(back, resolved);
}

#[test]
fn unknown_key_is_named() {
    let err = parse_config(r#"{"model": {"d": 2}, "sim": {"replicats": 10}}"#).unwrap_err();
    assert_eq!(err.0.len(), 1);
    assert!(err.0[0].path.contains("replicats"), "{err}");
    assert!(
        err.0[0].reason.contains("unknown field `replicats`"),
        "{err}"
    );
}

#[test]
fn finite_variance_branching_in_three_dimensions_is_rejected() {
    let err =
        parse_config(r#"{"experiment": "simulate", "model": {"d": 3, "beta": 1}}"#).unwrap_err();
    assert!(
        err.0.iter().any(|i| i.path == "model"
            && i.reason.contains("hypothesis")
            && i.reason.contains("beta < 1")),
        "{err}"
    );
    // the same model is fine for a kernel table
    assert!(parse_config(r#"{"experiment": "kernel", "model": {"d": 3, "beta": 1}}"#).is_ok());
}

#[test]
fn field_errors_are_collected() {
    let err = parse_config(
        r#"{"experiment": "kernel", "model": {"d": 4, "eta": -1}, "kernel": {"t": [1, -2]}}"#,
    )
    .unwrap_err();
    let paths: Vec<&str> = err.0.iter().map(|i| i.path.as_str()).collect();
    assert!(
        paths.contains(&"model.d") && paths.contains(&"model.eta"),
        "{paths:?}"
    );
    let err = parse_config(r#"{"experiment": "kernel", "kernel": {"t": [1, -2]}}"#).unwrap_err();
    assert_eq!(err.0[0].path, "kernel.t[1]");
}

#[test]
fn config_errors_exit_two_with_json() {
    let dir = scratch("cli_config_error");
    let out = run(&dir, r#"{"model": {"d": 3, "beta": 1.0}}"#, &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(dir.join("out/error.json").exists());
    let out = run(&dir, r#"{"model": {"d": 2}, "bogus": 1}"#, &["kernel"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn particle_cap_exits_three() {
    let dir = scratch("cli_cap");
    let cfg = r#"{"model": {"d": 2}, "grid": {"nodes": 128}, "sim": {"replicates": 4, "particle_cap": 1, "trotter_n": 8},
                  "simulate": {"mass": 50, "times": [1.0]}}"#;
    let out = run(&dir, cfg, &["simulate"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "particle_cap");
}

#[test]
fn kernel_table_has_the_documented_columns() {
    let dir = scratch("cli_kernel");
    let out = run(
        &dir,
        r#"{"model": {"d": 3, "alpha": 0.5}, "kernel": {"t": [1], "rx": [1], "ry": [2], "cos_angle": [0.5]}}"#,
        &["kernel"],
    );
    assert!(out.status.success());
    let text = fs::read_to_string(dir.join("out/kernel.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "d,alpha,t,rx,ry,cos_angle,heat,image,alpha_corr,total"
    );
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((row[6] + row[7] + row[8] - row[9]).abs() <= 1e-15 * row[9]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/kernel_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["config"]["model"]["beta"], 0.5);
}

#[test]
fn simulate_is_reproducible() {
    let dir = scratch("cli_simulate");
    let cfg = r#"{"model": {"d": 2}, "grid": {"nodes": 256}, "sim": {"replicates": 200, "trotter_n": 8},
                  "simulate": {"times": [0.25, 0.5]}}"#;
    let first = run(&dir, cfg, &["--seed", "5", "simulate"]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let a = fs::read(dir.join("out/simulate.csv")).unwrap();
    let second = run(&dir, cfg, &["--seed", "5", "simulate"]);
    assert!(second.status.success());
    assert_eq!(a, fs::read(dir.join("out/simulate.csv")).unwrap());
    let header = String::from_utf8_lossy(&a)
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(
        header,
        "time,replicate,n_particles,total_mass,pairing_value"
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/simulate_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["config"]["sim"]["seed"], 5);
    for s in summary["results"]["slices"].as_array().unwrap() {
        assert!(s["laplace"]["z"].as_f64().unwrap().abs() < 4.0, "{s}");
    }
}

fn max_residual(dir: &Path) -> f64 {
    let text = fs::read_to_string(dir.join("out/solve.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn trotter_residual_shrinks_with_level() {
    let dir = scratch("cli_solve");
    let cfg = r#"{"model": {"d": 2}, "solve": {"t": 0.5}}"#;
    let coarse = run(&dir, cfg, &["solve", "--method", "trotter", "--n", "8"]);
    assert!(
        coarse.status.success(),
        "{}",
        String::from_utf8_lossy(&coarse.stderr)
    );
    let r8 = max_residual(&dir);
    let fine = run(&dir, cfg, &["solve", "--method", "trotter", "--n", "64"]);
    assert!(fine.status.success());
    let r64 = max_residual(&dir);
    assert!(r64 < r8, "{r64} vs {r8}");
}

#[test]
fn verify_exit_codes() {
    let dir = scratch("cli_verify");
    let pass = run(&dir, r#"{"verify": {"criteria": [10]}}"#, &["verify"]);
    assert_eq!(pass.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&pass.stdout).contains("[PASS] 10"));
    let fail = run(&dir, r#"{"verify": {"criteria": [11]}}"#, &["verify"]);
    assert_eq!(fail.status.code(), Some(4));
    let csv = fs::read_to_string(dir.join("out/verify.csv")).unwrap();
    assert!(csv.starts_with("id,name,passed,measured,threshold,seconds,detail"));
}
