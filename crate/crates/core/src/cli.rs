//! Run configuration and experiment orchestration behind the `pointbirth` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::field::{GridSpec, ReferenceWeight, Semigroup, TestFunction, TestFunctionSpec};
use crate::kernel::{palpha_batch, KernelParams, SpacePoint};
use crate::loglaplace::{
    flow_bound, picard_solve, semigroup_for, trotter_solve, validate_hypothesis, ModelParams,
    SolverConfig,
};
use crate::simulate::{
    laplace_estimate, mean_estimate, Observable, ParticleCloud, SimConfig, Simulator,
};
use crate::verify::{CheckResult, Verifier, VerifyOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Kernel,
    Flow,
    Solve,
    Simulate,
    Verify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Kernel => "kernel",
            Experiment::Flow => "flow",
            Experiment::Solve => "solve",
            Experiment::Simulate => "simulate",
            Experiment::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    #[serde(default)]
    pub alpha: f64,
    /// `None`: 1 in d=2, 0.5 in d=3.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "one")]
    pub eta: f64,
    /// `None`: midpoint of the admissible interval.
    #[serde(default)]
    pub rho: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d: 2,
            alpha: 0.0,
            beta: None,
            eta: 1.0,
            rho: None,
        }
    }
}

impl ModelSpec {
    pub fn params(&self) -> ModelParams {
        let beta = self.beta.unwrap_or(if self.d == 3 { 0.5 } else { 1.0 });
        ModelParams::new(self.d, self.alpha, beta, self.eta, self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelJob {
    pub t: Vec<f64>,
    pub rx: Vec<f64>,
    pub ry: Vec<f64>,
    pub cos_angle: Vec<f64>,
}

impl Default for KernelJob {
    fn default() -> Self {
        Self {
            t: vec![0.1, 1.0],
            rx: vec![0.5, 1.0],
            ry: vec![0.5, 1.0, 2.0],
            cos_angle: vec![-1.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowJob {
    pub t: f64,
}

impl Default for FlowJob {
    fn default() -> Self {
        Self { t: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    #[default]
    Picard,
    Trotter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveJob {
    pub t: f64,
    pub method: SolveMethod,
    /// Trotter level; `None` uses `solver.trotter_n`.
    pub n: Option<usize>,
}

impl Default for SolveJob {
    fn default() -> Self {
        Self {
            t: 1.0,
            method: SolveMethod::Picard,
            n: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateJob {
    /// Initial measure: `mass` times the point mass at distance `radius` on the first axis.
    pub radius: f64,
    pub mass: f64,
    pub times: Vec<f64>,
}

impl Default for SimulateJob {
    fn default() -> Self {
        Self {
            radius: 1.0,
            mass: 1.0,
            times: vec![0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub dir: PathBuf,
    /// `None`: `<experiment>.csv`.
    pub csv: Option<String>,
    /// `None`: `<experiment>_summary.json`.
    pub summary: Option<String>,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: None,
            summary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub sim: SimConfig,
    pub phi: TestFunctionSpec,
    pub kernel: KernelJob,
    pub flow: FlowJob,
    pub solve: SolveJob,
    pub simulate: SimulateJob,
    pub verify: VerifyOptions,
    pub outputs: Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigIssue {
    pub path: String,
    pub reason: String,
}

/// Every problem found in a configuration, each with the path of the offending field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|i| format!("{}: {}", i.path, i.reason))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

/// Parses and validates a JSON configuration. The parameter hypothesis is
/// enforced when the document names `solve` or `simulate` as its experiment.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." {
            "(root)".to_string()
        } else {
            path
        };
        ConfigErrors(vec![ConfigIssue {
            path,
            reason: e.into_inner().to_string(),
        }])
    })?;
    cfg.validate(cfg.experiment)?;
    Ok(cfg)
}

fn issue(path: &str, reason: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        reason: reason.into(),
    }
}

fn positive_list(
    out: &mut Vec<ConfigIssue>,
    path: &str,
    xs: &[f64],
    ok: impl Fn(f64) -> bool,
    what: &str,
) {
    if xs.is_empty() {
        out.push(ConfigIssue {
            path: path.into(),
            reason: "must not be empty".into(),
        });
    }
    for (i, x) in xs.iter().enumerate() {
        if !ok(*x) {
            out.push(ConfigIssue {
                path: format!("{path}[{i}]"),
                reason: format!("{x} {what}"),
            });
        }
    }
}

impl RunConfig {
    /// Cross-field checks; `experiment` selects the job-specific ones.
    pub fn validate(&self, experiment: Option<Experiment>) -> Result<(), ConfigErrors> {
        let mut out = Vec::new();
        if let (Some(a), Some(b)) = (self.experiment, experiment) {
            if a != b {
                out.push(issue(
                    "experiment",
                    format!(
                        "config is for `{}` but `{}` was requested",
                        a.name(),
                        b.name()
                    ),
                ));
            }
        }
        let m = &self.model;
        if m.d != 2 && m.d != 3 {
            out.push(issue("model.d", format!("{} is not 2 or 3", m.d)));
        }
        if !m.alpha.is_finite() {
            out.push(issue("model.alpha", "must be finite"));
        }
        if let Some(b) = m.beta {
            if !(b > 0.0 && b <= 1.0) {
                out.push(issue("model.beta", format!("{b} not in (0, 1]")));
            }
        }
        if !(m.eta >= 0.0 && m.eta.is_finite()) {
            out.push(issue(
                "model.eta",
                format!("{} must be finite and >= 0", m.eta),
            ));
        }
        if let Some(r) = m.rho {
            if !(r >= 1.0 && r.is_finite()) {
                out.push(issue("model.rho", format!("{r} must be >= 1")));
            }
        }
        if let Err(e) = self.solver.validate() {
            out.push(issue("solver", e.to_string()));
        }
        if let Err(e) = self.sim.validate() {
            out.push(issue("sim", e.to_string()));
        }
        let shape_ok = out.is_empty();
        let params = m.params();
        if shape_ok {
            if let Err(e) = self.grid.build(m.d, self.horizon(experiment)) {
                out.push(issue("grid", e.to_string()));
            }
            if let Err(e) = TestFunction::from_spec(&self.phi, m.d, params.rho) {
                out.push(issue("phi", e.to_string()));
            }
        }
        match experiment {
            Some(Experiment::Kernel) => {
                positive_list(
                    &mut out,
                    "kernel.t",
                    &self.kernel.t,
                    |x| x > 0.0 && x.is_finite(),
                    "must be positive",
                );
                positive_list(
                    &mut out,
                    "kernel.rx",
                    &self.kernel.rx,
                    |x| x > 0.0 && x.is_finite(),
                    "must be positive",
                );
                positive_list(
                    &mut out,
                    "kernel.ry",
                    &self.kernel.ry,
                    |x| x > 0.0 && x.is_finite(),
                    "must be positive",
                );
                positive_list(
                    &mut out,
                    "kernel.cos_angle",
                    &self.kernel.cos_angle,
                    |x| (-1.0..=1.0).contains(&x),
                    "not in [-1, 1]",
                );
            }
            Some(Experiment::Flow) => positive_list(
                &mut out,
                "flow.t",
                &[self.flow.t],
                |x| x > 0.0 && x.is_finite(),
                "must be positive",
            ),
            Some(Experiment::Solve) => {
                positive_list(
                    &mut out,
                    "solve.t",
                    &[self.solve.t],
                    |x| x > 0.0 && x.is_finite(),
                    "must be positive",
                );
                if self.solve.n == Some(0) {
                    out.push(ConfigIssue {
                        path: "solve.n".into(),
                        reason: "must be >= 1".into(),
                    });
                }
            }
            Some(Experiment::Simulate) => {
                let s = &self.simulate;
                positive_list(
                    &mut out,
                    "simulate.radius",
                    &[s.radius],
                    |x| x > 0.0 && x.is_finite(),
                    "must be positive",
                );
                positive_list(
                    &mut out,
                    "simulate.mass",
                    &[s.mass],
                    |x| x >= 0.0 && x.is_finite(),
                    "must be >= 0",
                );
                positive_list(
                    &mut out,
                    "simulate.times",
                    &s.times,
                    |x| x >= 0.0 && x.is_finite(),
                    "must be >= 0",
                );
            }
            Some(Experiment::Verify) => {
                positive_list(
                    &mut out,
                    "verify.criteria",
                    &self
                        .verify
                        .criteria
                        .iter()
                        .map(|&c| c as f64)
                        .collect::<Vec<_>>(),
                    |c| (1.0..=11.0).contains(&c),
                    "is not a criterion id (1..=11)",
                );
                if self.verify.replicates == 0 {
                    out.push(ConfigIssue {
                        path: "verify.replicates".into(),
                        reason: "must be >= 1".into(),
                    });
                }
            }
            None => {}
        }
        if shape_ok && matches!(experiment, Some(Experiment::Solve | Experiment::Simulate)) {
            let report = validate_hypothesis(&params);
            if !report.ok {
                out.push(ConfigIssue {
                    path: "model".into(),
                    reason: format!(
                        "parameter hypothesis violated: {}",
                        report.violations.join("; ")
                    ),
                });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(out))
        }
    }

    /// Longest time the experiment's grid has to cover.
    fn horizon(&self, experiment: Option<Experiment>) -> f64 {
        let t = match experiment {
            Some(Experiment::Kernel) => self.kernel.t.iter().copied().fold(0.0, f64::max),
            Some(Experiment::Flow) => self.flow.t,
            Some(Experiment::Solve) => self.solve.t + 1.0 / self.solve_level() as f64,
            Some(Experiment::Simulate) => {
                self.simulate.times.iter().copied().fold(0.0, f64::max)
                    + 2.0 / self.sim.trotter_n as f64
            }
            _ => self.solver.horizon,
        };
        t.max(self.solver.horizon)
    }

    fn solve_level(&self) -> usize {
        self.solve.n.unwrap_or(self.solver.trotter_n).max(1)
    }

    /// The config with every default that depends on other fields filled in.
    pub fn resolved(&self, experiment: Experiment) -> RunConfig {
        let mut c = self.clone();
        let p = self.model.params();
        c.experiment = Some(experiment);
        c.model.beta = Some(p.beta);
        c.model.rho = Some(p.rho);
        if experiment == Experiment::Solve && c.solve.method == SolveMethod::Trotter {
            c.solve.n = Some(self.solve_level());
        }
        c
    }
}

/// Anything that stops a run, with its process exit code.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigErrors),
    Numeric(Error),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 2,
            RunError::Numeric(e) => match e {
                Error::Domain(_) | Error::Hypothesis(_) | Error::Config { .. } => 2,
                _ => 3,
            },
        }
    }

    /// Machine-readable form written to stderr and `error.json`.
    pub fn to_json(&self) -> Value {
        match self {
            RunError::Config(c) => {
                json!({ "error": "config", "message": c.to_string(), "issues": c.0 })
            }
            RunError::Io(m) => json!({ "error": "io", "message": m }),
            RunError::Numeric(e) => {
                let kind = match e {
                    Error::Domain(_) => "domain",
                    Error::NonConvergence { .. } => "nonconvergence",
                    Error::Divergence { .. } => "divergence",
                    Error::MaxIterations { .. } => "max_iterations",
                    Error::Hypothesis(_) => "hypothesis",
                    Error::ParticleCap { .. } => "particle_cap",
                    Error::Config { .. } => "config",
                };
                json!({ "error": kind, "message": e.to_string() })
            }
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(c) => write!(f, "config error: {c}"),
            RunError::Numeric(e) => write!(f, "{e}"),
            RunError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Numeric(e)
    }
}

impl From<ConfigErrors> for RunError {
    fn from(e: ConfigErrors) -> Self {
        RunError::Config(e)
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub exit_code: i32,
    pub csv: PathBuf,
    pub summary: PathBuf,
    /// one line per verification check (verify only)
    pub lines: Vec<String>,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> Result<(), RunError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(&self.header).map_err(|e| io_err(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

struct Setup {
    params: ModelParams,
    sg: Semigroup,
    phi_fn: TestFunction,
}

fn setup(cfg: &RunConfig, experiment: Experiment) -> Result<Setup, RunError> {
    let params = cfg.model.params();
    let grid = Arc::new(cfg.grid.build(params.d, cfg.horizon(Some(experiment)))?);
    let sg = semigroup_for(&params, grid)?;
    let phi_fn = TestFunction::from_spec(&cfg.phi, params.d, params.rho)?;
    Ok(Setup { params, sg, phi_fn })
}

/// Runs one experiment and writes its CSV and summary JSON under `cfg.outputs.dir`.
pub fn run_experiment(cfg: &RunConfig, experiment: Experiment) -> Result<RunReport, RunError> {
    cfg.validate(Some(experiment))?;
    let resolved = cfg.resolved(experiment);
    let dir = &cfg.outputs.dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = experiment.name();
    let csv = dir.join(
        cfg.outputs
            .csv
            .clone()
            .unwrap_or_else(|| format!("{name}.csv")),
    );
    let summary = dir.join(
        cfg.outputs
            .summary
            .clone()
            .unwrap_or_else(|| format!("{name}_summary.json")),
    );

    let (table, results, exit_code, lines) = match experiment {
        Experiment::Kernel => {
            let (t, r) = kernel_table(cfg)?;
            (t, r, 0, Vec::new())
        }
        Experiment::Flow => {
            let (t, r) = flow_table(cfg)?;
            (t, r, 0, Vec::new())
        }
        Experiment::Solve => {
            let (t, r) = solve_table(cfg)?;
            (t, r, 0, Vec::new())
        }
        Experiment::Simulate => {
            let (t, r) = simulate_table(cfg)?;
            (t, r, 0, Vec::new())
        }
        Experiment::Verify => {
            let checks = Verifier::new(cfg.verify.clone()).run_all();
            let mut t = Table::new(&[
                "id",
                "name",
                "passed",
                "measured",
                "threshold",
                "seconds",
                "detail",
            ]);
            for c in &checks {
                t.rows.push(vec![
                    c.id.to_string(),
                    c.name.clone(),
                    c.passed.to_string(),
                    num(c.measured),
                    num(c.threshold),
                    num(c.seconds),
                    c.detail.clone(),
                ]);
            }
            let all = checks.iter().all(|c| c.passed);
            let lines = checks.iter().map(CheckResult::line).collect();
            (
                t,
                json!({ "all_passed": all, "checks": checks }),
                if all { 0 } else { 4 },
                lines,
            )
        }
    };
    table.write(&csv)?;
    let doc = json!({
        "experiment": name,
        "config": resolved,
        "csv": csv.file_name().map(|s| s.to_string_lossy().into_owned()),
        "results": results,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| io_err(&summary, e))?;
    fs::write(&summary, text + "\n").map_err(|e| io_err(&summary, e))?;
    Ok(RunReport {
        exit_code,
        csv,
        summary,
        lines,
    })
}

fn kernel_table(cfg: &RunConfig) -> Result<(Table, Value), RunError> {
    let d = cfg.model.d;
    let kp = KernelParams::new(d, cfg.model.alpha)?;
    let job = &cfg.kernel;
    let mut pts = Vec::new();
    for &t in &job.t {
        for &a in &job.rx {
            for &b in &job.ry {
                for &c in &job.cos_angle {
                    pts.push((
                        t,
                        SpacePoint::on_axis(d, a),
                        SpacePoint::at_angle(d, b, c),
                        a,
                        b,
                        c,
                    ));
                }
            }
        }
    }
    let batch: Vec<_> = pts.iter().map(|(t, x, y, ..)| (*t, *x, *y)).collect();
    let values = palpha_batch(&kp, &batch);
    let mut table = Table::new(&[
        "d",
        "alpha",
        "t",
        "rx",
        "ry",
        "cos_angle",
        "heat",
        "image",
        "alpha_corr",
        "total",
    ]);
    for ((t, _, _, a, b, c), v) in pts.iter().zip(values) {
        let v = v?;
        table.rows.push(vec![
            d.to_string(),
            num(kp.alpha),
            num(*t),
            num(*a),
            num(*b),
            num(*c),
            num(v.heat),
            num(v.image),
            num(v.alpha_corr),
            num(v.value),
        ]);
    }
    let rows = table.rows.len();
    Ok((table, json!({ "rows": rows })))
}

fn flow_table(cfg: &RunConfig) -> Result<(Table, Value), RunError> {
    let s = setup(cfg, Experiment::Flow)?;
    let phi = s.phi_fn.sample(&s.sg.grid);
    let t = cfg.flow.t;
    let (heat, corr) = s.sg.apply_parts(t, &phi)?;
    let w = ReferenceWeight { d: s.params.d };
    let mut table = Table::new(&[
        "r",
        "value",
        "heat_part",
        "correction_part",
        "envelope_ratio",
    ]);
    let mut worst: f64 = 0.0;
    for (i, &r) in s.sg.grid.nodes.iter().enumerate() {
        let value = heat.values[i] + corr.values[i];
        let ratio = value / (s.phi_fn.envelope_const * w.radial(r));
        worst = worst.max(ratio);
        table.rows.push(vec![
            num(r),
            num(value),
            num(heat.values[i]),
            num(corr.values[i]),
            num(ratio),
        ]);
    }
    Ok((
        table,
        json!({ "t": t, "max_envelope_ratio": worst, "input_envelope_ratio": s.phi_fn.envelope_ratio(&s.sg.grid) }),
    ))
}

fn solve_table(cfg: &RunConfig) -> Result<(Table, Value), RunError> {
    let s = setup(cfg, Experiment::Solve)?;
    let phi = s.phi_fn.sample(&s.sg.grid);
    let t = cfg.solve.t;
    let (sol, bounds) = match cfg.solve.method {
        SolveMethod::Picard => {
            let sol = picard_solve(&s.sg, &s.params, &phi, t, &cfg.solver)?;
            let bound = flow_bound(&s.sg, &phi, t, &cfg.solver)?;
            if bound.times.len() != sol.times.len() {
                return Err(Error::Domain(
                    "flow bound and solution use different time grids".into(),
                )
                .into());
            }
            (sol, bound.fields)
        }
        SolveMethod::Trotter => {
            let n = cfg.solve_level();
            let sol = trotter_solve(&s.sg, &s.params, &phi, t, n)?;
            // the level-n field at k/n has seen k + 1 flows of length 1/n
            let delta = 1.0 / n as f64;
            let mut b = vec![s.sg.apply(delta, &phi)?];
            for k in 1..sol.times.len() {
                let full = (sol.times[k] - sol.times[k - 1] - delta).abs() < 1e-9 * delta;
                let next = if full {
                    s.sg.apply(delta, &b[k - 1])?
                } else {
                    b[k - 1].clone()
                };
                b.push(next);
            }
            (sol, b)
        }
    };
    let mut table = Table::new(&["t", "r", "v", "upper_bound", "residual"]);
    for (k, (&tk, f)) in sol.times.iter().zip(&sol.fields).enumerate() {
        for (i, &r) in s.sg.grid.nodes.iter().enumerate() {
            table.rows.push(vec![
                num(tk),
                num(r),
                num(f.values[i]),
                num(bounds[k].values[i]),
                num(sol.residuals[k]),
            ]);
        }
    }
    let max_res = sol.residuals.iter().copied().fold(0.0, f64::max);
    let excess = sol
        .fields
        .iter()
        .zip(&bounds)
        .flat_map(|(f, b)| f.values.iter().zip(&b.values).map(|(v, u)| v - u))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((
        table,
        json!({
            "method": cfg.solve.method,
            "t": t,
            "iterations": sol.iterations,
            "contraction": if sol.contraction.is_finite() { json!(sol.contraction) } else { Value::Null },
            "clamp_count": sol.clamp_count,
            "max_residual": max_res,
            "max_bound_excess": excess,
        }),
    ))
}

fn simulate_table(cfg: &RunConfig) -> Result<(Table, Value), RunError> {
    let s = setup(cfg, Experiment::Simulate)?;
    let phi = s.phi_fn.sample(&s.sg.grid);
    let job = &cfg.simulate;
    let sim = Simulator::new(&s.params, &cfg.sim, &s.sg)?;
    let x = SpacePoint::on_axis(s.params.d, job.radius);
    let mu = ParticleCloud::point_mass(&x, job.mass)?;
    let max_pending = job
        .times
        .iter()
        .map(|&t| sim.max_pending(t))
        .max()
        .unwrap_or(0);
    let obs = Observable::new(&s.sg, &phi, sim.delta(), max_pending)?;
    let mut table = Table::new(&[
        "time",
        "replicate",
        "n_particles",
        "total_mass",
        "pairing_value",
    ]);
    let mut slices = Vec::new();
    for &t in &job.times {
        let records = sim.run(&mu, t, &obs)?;
        for r in &records {
            table.rows.push(vec![
                num(t),
                r.replicate.to_string(),
                r.n_particles.to_string(),
                num(r.total_mass),
                num(r.pairing),
            ]);
        }
        let lap = laplace_estimate(&records);
        let mean = mean_estimate(&records);
        let flows = sim.max_pending(t);
        let oracle_mean = job.mass * s.sg.apply(flows as f64 * sim.delta(), &phi)?.eval(&x);
        // the level-n solution is dual to the scheme that starts with a flow
        let oracle_laplace = if cfg.sim.initial_flow {
            let v = trotter_solve(&s.sg, &s.params, &phi, t, cfg.sim.trotter_n)?;
            Some((-job.mass * v.final_field().eval(&x)).exp())
        } else {
            None
        };
        slices.push(json!({
            "time": t,
            "replicates": records.len(),
            "flow_time": flows as f64 * sim.delta(),
            "laplace": { "estimate": lap.mean, "se": lap.se, "oracle": oracle_laplace, "z": oracle_laplace.map(|o| lap.z_score(o)) },
            "mean": { "estimate": mean.mean, "se": mean.se, "oracle": oracle_mean, "z": mean.z_score(oracle_mean) },
        }));
    }
    Ok((table, json!({ "slices": slices })))
}
