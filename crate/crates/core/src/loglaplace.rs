//! The log-Laplace equation v = S^α φ − η ∫ S^α (v^{1+β}) ds: Picard and
//! Trotter solvers, the linearized equation and residual diagnostics.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::field::{h_norm, FieldSample, Semigroup};
use crate::kernel::{reference_weight, KernelParams};
use crate::specfun::beta_fn;

/// Negative values above this fraction of the field's maximum count as quadrature noise.
pub const CLAMP_NOISE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub rho: f64,
}

/// Which inequality of the parameter hypothesis failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

impl ModelParams {
    /// `rho = None` picks the midpoint of the admissible interval.
    pub fn new(d: usize, alpha: f64, beta: f64, eta: f64, rho: Option<f64>) -> Self {
        let rho = rho.unwrap_or_else(|| Self::default_rho(d, beta));
        Self {
            d,
            alpha,
            beta,
            eta,
            rho,
        }
    }

    pub fn default_rho(d: usize, beta: f64) -> f64 {
        let (lo, hi) = Self::rho_interval(d, beta);
        0.5 * (lo + hi)
    }

    pub fn rho_interval(d: usize, beta: f64) -> (f64, f64) {
        let d = d as f64;
        (
            1.0 / (1.0 - beta * (d - 1.0) / (d + 1.0)),
            (d + 1.0) / (d - 1.0),
        )
    }

    pub fn kappa(&self) -> f64 {
        let d = self.d as f64;
        self.beta / 2.0 - self.beta * (d + 1.0) * (self.rho - 1.0) / (4.0 * self.rho)
    }

    pub fn lambda(&self) -> f64 {
        self.beta * (self.d as f64 - 1.0) / 4.0
    }

    pub fn kernel(&self) -> KernelParams {
        KernelParams {
            d: self.d,
            alpha: self.alpha,
        }
    }
}

pub fn validate_hypothesis(p: &ModelParams) -> HypothesisReport {
    let mut v = Vec::new();
    if p.d != 2 && p.d != 3 {
        v.push(format!("d = {} is not 2 or 3", p.d));
    }
    if !p.alpha.is_finite() {
        v.push("alpha must be finite".into());
    }
    if !(p.beta > 0.0 && p.beta <= 1.0) {
        v.push(format!("beta = {} not in (0, 1]", p.beta));
    }
    if !(p.eta >= 0.0) || !p.eta.is_finite() {
        v.push(format!("eta = {} must be >= 0", p.eta));
    }
    if v.is_empty() {
        if p.d == 3 && p.beta >= 1.0 {
            v.push("d = 3 requires beta < 1 (infinite variance branching)".into());
        }
        let (lo, hi) = ModelParams::rho_interval(p.d, p.beta);
        if !(p.rho > lo && p.rho < hi) {
            v.push(format!("rho = {} outside ({lo}, {hi})", p.rho));
        }
        let (k, l) = (p.kappa(), p.lambda());
        if !(k > 0.0 && k < 1.0) {
            v.push(format!("kappa = {k} not in (0, 1)"));
        }
        if !(k + l < 1.0) {
            v.push(format!("kappa + lambda = {} not < 1", k + l));
        }
    }
    HypothesisReport {
        ok: v.is_empty(),
        violations: v,
    }
}

fn require_hypothesis(p: &ModelParams) -> Result<()> {
    let r = validate_hypothesis(p);
    if r.ok {
        Ok(())
    } else {
        Err(Error::Hypothesis(r.violations.join("; ")))
    }
}

/// Exact flow of v' = −η v^{1+β} over time δ.
pub fn csb_step(v: f64, delta: f64, eta: f64, beta: f64) -> f64 {
    if eta == 0.0 || v == 0.0 {
        return v;
    }
    v / (1.0 + eta * beta * v.powf(beta) * delta).powf(1.0 / beta)
}

/// Both sides of |a(a∨0)^β − b(b∨0)^β| ≤ (1+β)(|a|+|b|)^β |a−b|.
pub fn elementary_bound(a: f64, b: f64, beta: f64) -> (f64, f64) {
    let lhs = (a * a.max(0.0).powf(beta) - b * b.max(0.0).powf(beta)).abs();
    let rhs = (1.0 + beta) * (a.abs() + b.abs()).powf(beta) * (a - b).abs();
    (lhs, rhs)
}

/// I(t) = t^{1−λ}/(1−λ) + t^{1−λ−κ} B(1−κ, 1−λ).
pub fn i_integral(t: f64, kappa: f64, lambda: f64) -> Result<f64> {
    if !(kappa >= 0.0 && lambda >= 0.0) || !(kappa + lambda < 1.0) {
        return Err(domain("need kappa, lambda >= 0 and kappa + lambda < 1"));
    }
    if !(t >= 0.0) {
        return Err(domain("t must be nonnegative"));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(t.powf(1.0 - lambda) / (1.0 - lambda)
        + t.powf(1.0 - lambda - kappa) * beta_fn(1.0 - kappa, 1.0 - lambda)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearMethod {
    /// exact solve of the discretized Volterra system by one-step marching
    #[default]
    March,
    /// the fixed-point iteration v ↦ S φ − ∫ S(ψ v) with contraction monitoring
    Iterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PicardInit {
    /// v₀ = S^α φ
    #[default]
    Flow,
    /// v₀ = 0
    Zero,
    /// v₀ = c S^α φ
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub horizon: f64,
    pub picard_tol: f64,
    pub max_picard_iters: usize,
    pub trotter_n: usize,
    pub steps_per_unit: usize,
    pub contraction_threshold: f64,
    pub linear_method: LinearMethod,
    pub linear_tol: f64,
    pub max_linear_iters: usize,
    pub init: PicardInit,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            picard_tol: 1e-8,
            max_picard_iters: 30,
            trotter_n: 8,
            steps_per_unit: 64,
            contraction_threshold: 0.5,
            linear_method: LinearMethod::March,
            linear_tol: 1e-12,
            max_linear_iters: 500,
            init: PicardInit::Flow,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.horizon,
            self.picard_tol,
            self.contraction_threshold,
            self.linear_tol,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) {
            return Err(domain("solver tolerances and horizon must be positive"));
        }
        if let PicardInit::Scaled(c) = self.init {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(domain("scaled initialization needs a finite c >= 0"));
            }
        }
        if self.max_picard_iters == 0
            || self.trotter_n == 0
            || self.steps_per_unit == 0
            || self.max_linear_iters == 0
        {
            return Err(domain("iteration counts and levels must be >= 1"));
        }
        Ok(())
    }

    /// Uniform step count for a horizon t.
    pub fn steps_for(&self, t: f64) -> usize {
        ((t * self.steps_per_unit as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Picard,
    Trotter,
    Linearized,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub method: Method,
    pub times: Vec<f64>,
    pub fields: Vec<FieldSample>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// last measured contraction factor (NaN if not applicable)
    pub contraction: f64,
    /// number of node values clamped at 0 beyond quadrature noise
    pub clamp_count: usize,
    /// fitted envelope constant of the linear potential, if any
    pub envelope_m: Option<f64>,
}

impl Solution {
    pub fn final_field(&self) -> &FieldSample {
        self.fields.last().unwrap()
    }

    /// sup over time nodes of ‖self − other‖_H (same time grid).
    pub fn sup_distance(&self, other: &Solution, rho: f64) -> Result<f64> {
        if self.times.len() != other.times.len() {
            return Err(domain("solutions live on different time grids"));
        }
        let mut m: f64 = 0.0;
        for (a, b) in self.fields.iter().zip(&other.fields) {
            m = m.max(h_norm(&a.zip_with(b, |x, y| x - y), rho)?);
        }
        Ok(m)
    }
}

fn uniform_times(t: f64, m: usize) -> Vec<f64> {
    (0..=m).map(|i| t * i as f64 / m as f64).collect()
}

/// U_i = S_h^i φ on the uniform grid.
fn flow_path(sg: &Semigroup, phi: &FieldSample, h: f64, m: usize) -> Result<Vec<FieldSample>> {
    let mut out = Vec::with_capacity(m + 1);
    out.push(phi.clone());
    for i in 1..=m {
        let next = sg.apply(h, &out[i - 1])?;
        out.push(next);
    }
    Ok(out)
}

/// Product-integration Volterra sums A_i ≈ ∫₀^{t_i} S_{t_i−s} g(s) ds for g linear on each
/// panel, via A_i = S_h A_{i−1} + W1 g_{i−1} + W0 g_i.
fn volterra_sums(sg: &Semigroup, g: &[Vec<f64>], h: f64) -> Result<Vec<Vec<f64>>> {
    let n = sg.grid.len();
    let op = sg.operator(h)?;
    let rule = sg.panel_rule(h)?;
    let mut out = vec![vec![0.0; n]];
    for i in 1..g.len() {
        let mut next = op.apply(&out[i - 1]);
        for (v, (a, b)) in next
            .iter_mut()
            .zip(rule.w1.apply(&g[i - 1]).iter().zip(rule.w0.apply(&g[i])))
        {
            *v += a + b;
        }
        out.push(next);
    }
    Ok(out)
}

fn envelope_constant(psi: &[FieldSample], times: &[f64], kappa: f64, beta: f64) -> f64 {
    let mut m: f64 = 0.0;
    for (p, &t) in psi.iter().zip(times).skip(1) {
        let g = &p.grid;
        for (&r, &v) in g.nodes.iter().zip(&p.values) {
            let env = (1.0 + t.powf(-kappa)) * reference_weight(g.d, r).powf(beta);
            m = m.max(v / env);
        }
    }
    m
}

/// Solve v = S^α φ − ∫₀^t S^α_{t−s}(ψ(s) v(s)) ds on the uniform grid carried by `psi`
/// (psi.len() − 1 steps of size t/(psi.len() − 1)).
pub fn linearized_solve(
    sg: &Semigroup,
    phi: &FieldSample,
    psi: &[FieldSample],
    t: f64,
    kappa_beta: Option<(f64, f64)>,
    config: &SolverConfig,
) -> Result<Solution> {
    if psi.len() < 2 {
        return Err(domain("psi must be given on at least two time nodes"));
    }
    if !(t > 0.0) {
        return Err(domain("t must be positive"));
    }
    let m = psi.len() - 1;
    let h = t / m as f64;
    let times = uniform_times(t, m);
    if psi
        .iter()
        .any(|p| p.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()))
    {
        return Err(domain("psi must be finite and nonnegative"));
    }
    let envelope_m = kappa_beta.map(|(k, b)| envelope_constant(psi, &times, k, b));
    if let Some(mm) = envelope_m {
        if !mm.is_finite() {
            return Err(domain("psi violates the envelope bound"));
        }
    }
    let (mut fields, iterations, contraction) = match config.linear_method {
        LinearMethod::March => (march(sg, phi, psi, h)?, 1, f64::NAN),
        LinearMethod::Iterate => iterate(sg, phi, psi, h, config)?,
    };
    let mut clamp_count = 0;
    for f in fields.iter_mut() {
        let noise = CLAMP_NOISE * f.max_abs();
        let mut vals = f.values.clone();
        for v in vals.iter_mut() {
            if *v < 0.0 {
                if *v < -noise {
                    clamp_count += 1;
                }
                *v = 0.0;
            }
        }
        *f = FieldSample::new(f.grid.clone(), vals, f.singularity_order);
    }
    Ok(Solution {
        method: Method::Linearized,
        times,
        fields,
        residuals: Vec::new(),
        iterations,
        contraction,
        clamp_count,
        envelope_m,
    })
}

/// Solves V_i + W0(ψ_i V_i) = S_h V_{i−1} − W1(ψ_{i−1} V_{i−1}) step by step; the implicit
/// panel term is a small smoothing perturbation and yields to fixed-point iteration.
fn march(
    sg: &Semigroup,
    phi: &FieldSample,
    psi: &[FieldSample],
    h: f64,
) -> Result<Vec<FieldSample>> {
    let op = sg.operator(h)?;
    let rule = sg.panel_rule(h)?;
    let mut out = vec![phi.clone()];
    for i in 1..psi.len() {
        let prev = &out[i - 1].values;
        let g_prev: Vec<f64> = prev
            .iter()
            .zip(&psi[i - 1].values)
            .map(|(v, p)| v * p)
            .collect();
        let rhs: Vec<f64> = op
            .apply(prev)
            .iter()
            .zip(rule.w1.apply(&g_prev))
            .map(|(a, b)| a - b)
            .collect();
        let v = solve_panel(&rule.w0, &psi[i].values, &rhs, h)?;
        out.push(FieldSample::new(sg.grid.clone(), v, None));
    }
    Ok(out)
}

const PANEL_SOLVE_TOL: f64 = 1e-15;
const PANEL_SOLVE_ITERS: usize = 500;

/// x + W0(ψ x) = rhs.
fn solve_panel(w0: &crate::field::LinearMap, psi: &[f64], rhs: &[f64], h: f64) -> Result<Vec<f64>> {
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x: Vec<f64> = rhs
        .iter()
        .zip(psi)
        .map(|(r, p)| r / (1.0 + 0.5 * h * p))
        .collect();
    if scale == 0.0 {
        return Ok(x);
    }
    let mut last = f64::INFINITY;
    for _ in 0..PANEL_SOLVE_ITERS {
        let gx: Vec<f64> = x.iter().zip(psi).map(|(v, p)| v * p).collect();
        let next: Vec<f64> = rhs.iter().zip(w0.apply(&gx)).map(|(r, w)| r - w).collect();
        let delta = next
            .iter()
            .zip(&x)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x = next;
        if delta <= PANEL_SOLVE_TOL * scale {
            return Ok(x);
        }
        if !delta.is_finite() || (delta > last && delta > 1e-8 * scale) {
            return Err(Error::Divergence {
                factor: delta / last,
            });
        }
        last = delta;
    }
    Err(Error::MaxIterations {
        iters: PANEL_SOLVE_ITERS,
        factor: f64::NAN,
    })
}

fn iterate(
    sg: &Semigroup,
    phi: &FieldSample,
    psi: &[FieldSample],
    h: f64,
    config: &SolverConfig,
) -> Result<(Vec<FieldSample>, usize, f64)> {
    let m = psi.len() - 1;
    let u = flow_path(sg, phi, h, m)?;
    let rho = 2.0;
    let mut v: Vec<FieldSample> = u.clone();
    let mut last_delta = f64::NAN;
    let mut factor = f64::NAN;
    let mut growth = 0;
    for k in 1..=config.max_linear_iters {
        let g: Vec<Vec<f64>> = v
            .iter()
            .zip(psi)
            .map(|(vi, p)| {
                vi.values
                    .iter()
                    .zip(&p.values)
                    .map(|(a, b)| a * b)
                    .collect()
            })
            .collect();
        let a = volterra_sums(sg, &g, h)?;
        let next: Vec<FieldSample> = u
            .iter()
            .zip(&a)
            .map(|(ui, ai)| {
                FieldSample::new(
                    sg.grid.clone(),
                    ui.values.iter().zip(ai).map(|(x, y)| x - y).collect(),
                    None,
                )
            })
            .collect();
        let mut delta: f64 = 0.0;
        for (x, y) in next.iter().zip(&v) {
            delta = delta.max(h_norm(&x.zip_with(y, |p, q| p - q), rho)?);
        }
        if last_delta.is_finite() && last_delta > 0.0 {
            factor = delta / last_delta;
            // the Volterra iteration may grow transiently; persistent growth is divergence
            growth = if factor >= 1.0 { growth + 1 } else { 0 };
            if growth >= 25 || !delta.is_finite() {
                return Err(Error::Divergence { factor });
            }
        }
        v = next;
        last_delta = delta;
        if delta < config.linear_tol {
            return Ok((v, k, factor));
        }
    }
    Err(Error::MaxIterations {
        iters: config.max_linear_iters,
        factor,
    })
}

/// Discrete defect ‖v_i − S_{t_i} φ + η ∫ S(v^{1+β})‖_H on the solution's own time nodes,
/// recomputed from scratch with the full nonlinearity and the product-integration rule.
pub fn residual(
    sg: &Semigroup,
    solution: &Solution,
    phi: &FieldSample,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let times = &solution.times;
    let n = sg.grid.len();
    let mut out = Vec::with_capacity(times.len());
    let mut u = phi.values.clone();
    let mut a = vec![0.0; n];
    let g = |f: &FieldSample| -> Vec<f64> {
        f.values
            .iter()
            .map(|v| params.eta * v.max(0.0).powf(1.0 + params.beta))
            .collect()
    };
    let mut g_prev = g(&solution.fields[0]);
    for (i, f) in solution.fields.iter().enumerate() {
        if i > 0 {
            let dt = times[i] - times[i - 1];
            let op = sg.operator(dt)?;
            let rule = sg.panel_rule(dt)?;
            let gi = g(f);
            u = op.apply(&u);
            let mut next = op.apply(&a);
            for (v, (x, y)) in next
                .iter_mut()
                .zip(rule.w1.apply(&g_prev).iter().zip(rule.w0.apply(&gi)))
            {
                *v += x + y;
            }
            a = next;
            g_prev = gi;
        }
        let defect: Vec<f64> = f
            .values
            .iter()
            .zip(&u)
            .zip(&a)
            .map(|((v, uu), aa)| v - uu + aa)
            .collect();
        out.push(h_norm(
            &FieldSample::new(sg.grid.clone(), defect, None),
            params.rho,
        )?);
    }
    Ok(out)
}

/// Picard iteration v_{k+1} = linearized_solve(ψ = η v_k^β) with time-window continuation.
pub fn picard_solve(
    sg: &Semigroup,
    params: &ModelParams,
    phi: &FieldSample,
    t: f64,
    config: &SolverConfig,
) -> Result<Solution> {
    require_hypothesis(params)?;
    config.validate()?;
    check_semigroup(sg, params)?;
    if !(t > 0.0) {
        return Err(domain("t must be positive"));
    }
    let m_total = config.steps_for(t);
    let h = t / m_total as f64;
    let mut times = vec![0.0];
    let mut fields = vec![phi.clone()];
    let mut start = 0usize;
    let mut window = m_total;
    let mut iterations = 0;
    let mut last_factor = f64::NAN;
    let mut clamp_count = 0;
    while start < m_total {
        let steps = window.min(m_total - start);
        let init = fields.last().unwrap().clone();
        match picard_window(sg, params, &init, h, steps, config) {
            Ok((w, iters, factor, clamps)) => {
                iterations += iters;
                last_factor = factor;
                clamp_count += clamps;
                for (k, f) in w.into_iter().enumerate().skip(1) {
                    times.push((start + k) as f64 * h);
                    fields.push(f);
                }
                start += steps;
            }
            Err(Error::Divergence { factor }) if steps > 1 => {
                last_factor = factor;
                window = (steps / 2).max(1);
            }
            Err(e) => return Err(e),
        }
    }
    let mut sol = Solution {
        method: Method::Picard,
        times,
        fields,
        residuals: Vec::new(),
        iterations,
        contraction: last_factor,
        clamp_count,
        envelope_m: None,
    };
    sol.residuals = residual(sg, &sol, phi, params)?;
    Ok(sol)
}

fn check_semigroup(sg: &Semigroup, params: &ModelParams) -> Result<()> {
    if sg.params.d != params.d || sg.params.alpha != params.alpha {
        return Err(domain("semigroup parameters differ from model parameters"));
    }
    Ok(())
}

type WindowResult = (Vec<FieldSample>, usize, f64, usize);

fn picard_window(
    sg: &Semigroup,
    params: &ModelParams,
    init: &FieldSample,
    h: f64,
    steps: usize,
    config: &SolverConfig,
) -> Result<WindowResult> {
    let t = h * steps as f64;
    let mut v: Vec<FieldSample> = match config.init {
        PicardInit::Flow => flow_path(sg, init, h, steps)?,
        PicardInit::Zero => vec![FieldSample::zeros(sg.grid.clone()); steps + 1],
        PicardInit::Scaled(c) => flow_path(sg, init, h, steps)?
            .into_iter()
            .map(|f| f.map(|v| c * v))
            .collect(),
    };
    let mut last_delta = f64::NAN;
    let mut factor = f64::NAN;
    let kb = Some((params.kappa(), params.beta));
    for k in 1..=config.max_picard_iters {
        let psi: Vec<FieldSample> = v
            .iter()
            .map(|f| f.map(|x| params.eta * x.max(0.0).powf(params.beta)))
            .collect();
        let sol = linearized_solve(sg, init, &psi, t, kb, config)?;
        let mut delta: f64 = 0.0;
        for (a, b) in sol.fields.iter().zip(&v) {
            delta = delta.max(h_norm(&a.zip_with(b, |x, y| x - y), params.rho)?);
        }
        if last_delta.is_finite() && last_delta > 0.0 {
            factor = delta / last_delta;
            if k >= 4 && factor > config.contraction_threshold && steps > 1 {
                return Err(Error::Divergence { factor });
            }
        }
        v = sol.fields;
        if delta < config.picard_tol {
            return Ok((v, k, factor, sol.clamp_count));
        }
        last_delta = delta;
    }
    Err(Error::MaxIterations {
        iters: config.max_picard_iters,
        factor,
    })
}

/// Trotter scheme: v_n(0) = S_{1/n} φ, exact branching flow on [k/n, (k+1)/n), S_{1/n} at (k+1)/n.
pub fn trotter_solve(
    sg: &Semigroup,
    params: &ModelParams,
    phi: &FieldSample,
    t: f64,
    n: usize,
) -> Result<Solution> {
    require_hypothesis(params)?;
    check_semigroup(sg, params)?;
    if n == 0 {
        return Err(domain("n must be >= 1"));
    }
    if !(t >= 0.0) {
        return Err(domain("t must be nonnegative"));
    }
    let delta = 1.0 / n as f64;
    let kmax = (t * n as f64 + 1e-9).floor() as usize;
    let frac = (t - kmax as f64 * delta).max(0.0);
    let csb =
        |f: &FieldSample, dt: f64| f.map(|x| csb_step(x.max(0.0), dt, params.eta, params.beta));
    let mut times = vec![0.0];
    let mut fields = vec![sg.apply(delta, phi)?];
    for k in 1..=kmax {
        let next = sg.apply(delta, &csb(&fields[k - 1], delta))?;
        times.push(k as f64 * delta);
        fields.push(next);
    }
    if frac > 1e-12 {
        let last = csb(fields.last().unwrap(), frac);
        times.push(t);
        fields.push(last);
    }
    let mut sol = Solution {
        method: Method::Trotter,
        times,
        fields,
        residuals: Vec::new(),
        iterations: 0,
        contraction: f64::NAN,
        clamp_count: 0,
        envelope_m: None,
    };
    sol.residuals = residual(sg, &sol, phi, params)?;
    Ok(sol)
}

/// S^α_t φ on the uniform grid the Picard solver uses (the domination bound).
pub fn flow_bound(
    sg: &Semigroup,
    phi: &FieldSample,
    t: f64,
    config: &SolverConfig,
) -> Result<Solution> {
    let m = config.steps_for(t);
    let fields = flow_path(sg, phi, t / m as f64, m)?;
    Ok(Solution {
        method: Method::Linearized,
        times: uniform_times(t, m),
        fields,
        residuals: Vec::new(),
        iterations: 0,
        contraction: f64::NAN,
        clamp_count: 0,
        envelope_m: None,
    })
}

/// Convenience: semigroup for a model on a grid.
pub fn semigroup_for(
    params: &ModelParams,
    grid: Arc<crate::field::RadialGrid>,
) -> Result<Semigroup> {
    Semigroup::new(params.kernel(), grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridSpec, TestFunction};
    use crate::quad::{integrate_value, Tolerance};

    fn setup(
        d: usize,
        alpha: f64,
        beta: f64,
        eta: f64,
        rho: f64,
        nodes: usize,
    ) -> (Semigroup, ModelParams, FieldSample) {
        let p = ModelParams::new(d, alpha, beta, eta, Some(rho));
        let g = Arc::new(
            GridSpec {
                nodes: Some(nodes),
                r_min: Some(1e-4),
                r_max: None,
            }
            .build(d, 1.0)
            .unwrap(),
        );
        let phi = TestFunction::gaussian(d, rho, 1.0, 1.0).sample(&g);
        (semigroup_for(&p, g).unwrap(), p, phi)
    }

    fn sup_diff(a: &FieldSample, b: &FieldSample) -> f64 {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn hypothesis_examples() {
        assert!(!validate_hypothesis(&ModelParams::new(3, 0.0, 1.0, 1.0, Some(1.6))).ok);
        assert!(validate_hypothesis(&ModelParams::new(2, 0.0, 1.0, 1.0, Some(2.0))).ok);
        assert!(validate_hypothesis(&ModelParams::new(3, 0.0, 0.5, 1.0, Some(1.6))).ok);
        let r = validate_hypothesis(&ModelParams::new(2, 0.0, 1.0, 1.0, Some(3.5)));
        assert!(r.violations.iter().any(|v| v.contains("rho")));
        let p = ModelParams::new(2, 0.0, 1.0, 1.0, None);
        assert_eq!(p.rho, 2.25);
    }

    #[test]
    fn csb_examples() {
        assert_eq!(csb_step(1.0, 1.0, 1.0, 1.0), 0.5);
        assert!((csb_step(1.0, 1.0, 1.0, 0.5) - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(csb_step(0.7, 1.0, 0.0, 0.5), 0.7);
        let (a, b) = (
            csb_step(0.9, 0.3, 1.3, 0.6),
            csb_step(csb_step(0.9, 0.1, 1.3, 0.6), 0.2, 1.3, 0.6),
        );
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn elementary_examples() {
        assert_eq!(elementary_bound(0.3, 0.3, 0.5), (0.0, 0.0));
        assert_eq!(elementary_bound(1.0, 0.0, 1.0), (1.0, 2.0));
        let (l, r) = elementary_bound(-1.0, 1.0, 0.5);
        assert_eq!(l, 1.0);
        assert!((r - 1.5 * 2f64.sqrt() * 2.0).abs() < 1e-12);
    }

    #[test]
    fn i_integral_examples() {
        assert!((i_integral(0.7, 0.0, 0.0).unwrap() - 1.4).abs() < 1e-14);
        assert!(i_integral(1.0, 0.6, 0.5).is_err());
        // ∫₀¹ s^{-1/4}(1-s)^{-1/4} ds = 2∫₀^{1/2}, with s = u⁴ removing the endpoint singularity
        let ub = 0.5f64.powf(0.25);
        let b = 2.0
            * integrate_value(
                |u| 4.0 * u * u * (1.0 - u.powi(4)).powf(-0.25),
                &[0.0, ub],
                Tolerance::rel(1e-13),
            )
            .unwrap();
        assert!((i_integral(1.0, 0.25, 0.25).unwrap() - (4.0 / 3.0 + b)).abs() < 1e-11);
        let mut last = 0.0;
        for k in 1..40 {
            let v = i_integral(0.1 * k as f64, 0.3, 0.4).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn linearized_zero_and_constant_potential() {
        let (sg, _, phi) = setup(3, 0.0, 0.5, 1.0, 1.6, 128);
        let cfg = SolverConfig::default();
        let m = 128;
        let t = 1.0;
        let zero = vec![FieldSample::zeros(sg.grid.clone()); m + 1];
        let s = linearized_solve(&sg, &phi, &zero, t, None, &cfg).unwrap();
        let mut exact = phi.clone();
        for _ in 0..m {
            exact = sg.apply(t / m as f64, &exact).unwrap();
        }
        assert!(sup_diff(s.final_field(), &exact.map(|v| v.max(0.0))) < 1e-12 * exact.max_abs());
        let c = 0.8;
        let cpsi = vec![FieldSample::zeros(sg.grid.clone()).map(|_| c); m + 1];
        for method in [LinearMethod::March, LinearMethod::Iterate] {
            let s = linearized_solve(
                &sg,
                &phi,
                &cpsi,
                t,
                None,
                &SolverConfig {
                    linear_method: method,
                    ..cfg
                },
            )
            .unwrap();
            let want = exact.map(|v| v * (-c * t).exp());
            assert!(
                sup_diff(s.final_field(), &want) < 1e-5 * exact.max_abs(),
                "{method:?}"
            );
            assert_eq!(s.clamp_count, 0, "{method:?}");
        }
    }

    #[test]
    fn first_picard_iterate_is_linearized_with_flow_potential() {
        let (sg, p, phi) = setup(3, 0.0, 0.5, 1.0, 1.6, 96);
        let cfg = SolverConfig {
            max_picard_iters: 1,
            picard_tol: 1e3,
            ..SolverConfig::default()
        };
        let pic = picard_solve(&sg, &p, &phi, 0.5, &cfg).unwrap();
        let flow = flow_bound(&sg, &phi, 0.5, &cfg).unwrap();
        let psi: Vec<_> = flow
            .fields
            .iter()
            .map(|f| f.map(|v| v.max(0.0).powf(p.beta)))
            .collect();
        let lin = linearized_solve(&sg, &phi, &psi, 0.5, None, &cfg).unwrap();
        assert_eq!(pic.final_field().values, lin.final_field().values);
    }

    #[test]
    fn picard_zero_rate_is_flow_and_positive_rate_is_below() {
        let (sg, p, phi) = setup(2, 0.0, 1.0, 0.0, 2.0, 256);
        let cfg = SolverConfig::default();
        let s = picard_solve(&sg, &p, &phi, 1.0, &cfg).unwrap();
        let flow = flow_bound(&sg, &phi, 1.0, &cfg).unwrap();
        let dd = sup_diff(s.final_field(), flow.final_field());
        assert!(dd < 1e-5 * flow.final_field().max_abs());
        let p1 = ModelParams { eta: 1.0, ..p };
        let s1 = picard_solve(&sg, &p1, &phi, 1.0, &cfg).unwrap();
        assert!(s1.residuals.iter().all(|r| *r < 1e-7), "{:?}", s1.residuals);
        for (v, u) in s1.fields.iter().zip(&flow.fields).skip(1) {
            let floor = 1e-6 * u.max_abs();
            for (a, b) in v.values.iter().zip(&u.values) {
                assert!(*a >= 0.0 && *a <= b.max(0.0) + 1e-10 * u.max_abs());
                assert!(a < b || *b < floor);
            }
        }
        let s0 = picard_solve(
            &sg,
            &p1,
            &phi,
            1.0,
            &SolverConfig {
                init: PicardInit::Scaled(0.3),
                ..cfg
            },
        )
        .unwrap();
        assert!(s0.sup_distance(&s1, 2.0).unwrap() < 1e-7);
    }

    #[test]
    fn trotter_examples() {
        let (sg, p, phi) = setup(2, 0.0, 1.0, 0.0, 2.0, 128);
        let s = trotter_solve(&sg, &p, &phi, 0.75, 4).unwrap();
        let mut want = phi.clone();
        for _ in 0..4 {
            want = sg.apply(0.25, &want).unwrap();
        }
        assert!(sup_diff(s.final_field(), &want) < 1e-6 * want.max_abs());
        let direct = sg.apply(1.0, &phi).unwrap();
        assert!(
            h_norm(&direct.zip_with(&want, |a, b| a - b), 2.0).unwrap()
                < 1e-2 * h_norm(&phi, 2.0).unwrap()
        );
        let p1 = ModelParams { eta: 1.0, ..p };
        let s = trotter_solve(&sg, &p1, &phi, 0.6, 1).unwrap();
        let want = sg
            .apply(1.0, &phi)
            .unwrap()
            .map(|v| csb_step(v.max(0.0), 0.6, 1.0, 1.0));
        assert!(sup_diff(s.final_field(), &want) < 1e-15);
        assert_eq!(s.times, vec![0.0, 0.6]);
    }
}
