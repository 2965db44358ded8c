//! Test functions, the weighted norm ‖·‖_H and grid quadrature for the
//! semigroups S, S̄ and S^α acting on radial functions.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kernel::{
    heat_sphere_average, palpha_correction_tol, reference_weight, sphere_area, D2Rule,
    KernelParams, SpacePoint,
};
use crate::quad::{integrate_value, Tolerance};

const OPERATOR_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceWeight {
    pub d: usize,
}

impl ReferenceWeight {
    pub fn radial(&self, r: f64) -> f64 {
        reference_weight(self.d, r)
    }

    pub fn eval(&self, x: &SpacePoint) -> f64 {
        self.radial(x.norm())
    }
}

type Profile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Evaluator = Arc<dyn Fn(&SpacePoint) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunctionSpec {
    /// amplitude · exp(−|x|²/4σ)
    Gaussian { amplitude: f64, sigma: f64 },
    /// φ^ξ · exp(−|x|²/4σ)
    WeightPower { xi: f64, sigma: f64 },
    /// logistic-mollified indicator of the ball of given radius
    Ball { radius: f64, width: f64 },
}

impl Default for TestFunctionSpec {
    fn default() -> Self {
        TestFunctionSpec::Gaussian {
            amplitude: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Clone)]
pub struct TestFunction {
    pub label: String,
    pub d: usize,
    pub rho: f64,
    pub envelope_const: f64,
    pub radial: bool,
    /// f(r) ~ r^{-order} as r → 0
    pub singularity_order: f64,
    profile: Option<Profile>,
    eval: Evaluator,
    breakpoints: Vec<f64>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("label", &self.label)
            .field("d", &self.d)
            .field("rho", &self.rho)
            .field("envelope_const", &self.envelope_const)
            .field("radial", &self.radial)
            .finish()
    }
}

fn half_dim(d: usize) -> f64 {
    (d as f64 - 1.0) / 2.0
}

impl TestFunction {
    pub fn radial_fn(
        d: usize,
        rho: f64,
        label: impl Into<String>,
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
        envelope_const: f64,
        singularity_order: f64,
    ) -> Self {
        let profile: Profile = Arc::new(profile);
        let p2 = profile.clone();
        Self {
            label: label.into(),
            d,
            rho,
            envelope_const,
            radial: true,
            singularity_order,
            profile: Some(profile),
            eval: Arc::new(move |x: &SpacePoint| p2(x.norm())),
            breakpoints: Vec::new(),
        }
    }

    /// A general (not necessarily radial) function; only its spherical means
    /// enter the grid operators.
    pub fn general(
        d: usize,
        rho: f64,
        label: impl Into<String>,
        f: impl Fn(&SpacePoint) -> f64 + Send + Sync + 'static,
        envelope_const: f64,
    ) -> Self {
        Self {
            label: label.into(),
            d,
            rho,
            envelope_const,
            radial: false,
            singularity_order: 0.0,
            profile: None,
            eval: Arc::new(f),
            breakpoints: Vec::new(),
        }
    }

    pub fn with_breakpoints(mut self, pts: &[f64]) -> Self {
        self.breakpoints = pts.to_vec();
        self
    }

    pub fn gaussian(d: usize, rho: f64, amplitude: f64, sigma: f64) -> Self {
        let k = half_dim(d);
        let c = amplitude * (2.0 * k * sigma).powf(k / 2.0) * (-k / 2.0).exp();
        Self::radial_fn(
            d,
            rho,
            format!("gaussian(a={amplitude},s={sigma})"),
            move |r| amplitude * (-r * r / (4.0 * sigma)).exp(),
            c,
            0.0,
        )
    }

    pub fn weight_power(d: usize, rho: f64, xi: f64, sigma: f64) -> Self {
        let k = half_dim(d);
        let e = (1.0 - xi) * k;
        let c = if e > 0.0 {
            (2.0 * e * sigma).powf(e / 2.0) * (-e / 2.0).exp()
        } else {
            1.0
        };
        Self::radial_fn(
            d,
            rho,
            format!("weight_power(xi={xi},s={sigma})"),
            move |r| r.powf(-xi * k) * (-r * r / (4.0 * sigma)).exp(),
            c,
            xi * k,
        )
    }

    pub fn ball(d: usize, rho: f64, radius: f64, width: f64) -> Self {
        let k = half_dim(d);
        let prof = move |r: f64| 1.0 / (1.0 + ((r - radius) / width).exp());
        let hi = radius + 60.0 * width;
        let c = (0..20_000)
            .map(|i| {
                let r = hi * (i as f64 + 0.5) / 20_000.0;
                r.powf(k) * prof(r)
            })
            .fold(0.0, f64::max)
            * (1.0 + 1e-3);
        Self::radial_fn(d, rho, format!("ball(R={radius},w={width})"), prof, c, 0.0)
            .with_breakpoints(&[radius])
    }

    pub fn from_spec(spec: &TestFunctionSpec, d: usize, rho: f64) -> Result<Self> {
        match *spec {
            TestFunctionSpec::Gaussian { amplitude, sigma } => {
                if !(amplitude >= 0.0 && sigma > 0.0) {
                    return Err(domain("gaussian needs amplitude >= 0 and sigma > 0"));
                }
                Ok(Self::gaussian(d, rho, amplitude, sigma))
            }
            TestFunctionSpec::WeightPower { xi, sigma } => {
                if !((0.0..=1.0).contains(&xi) && sigma > 0.0) {
                    return Err(domain("weight_power needs 0 <= xi <= 1 and sigma > 0"));
                }
                Ok(Self::weight_power(d, rho, xi, sigma))
            }
            TestFunctionSpec::Ball { radius, width } => {
                if !(radius > 0.0 && width > 0.0) {
                    return Err(domain("ball needs positive radius and width"));
                }
                Ok(Self::ball(d, rho, radius, width))
            }
        }
    }

    pub fn eval(&self, x: &SpacePoint) -> f64 {
        (self.eval)(x)
    }

    /// Radial profile if the function is radial.
    pub fn profile(&self, r: f64) -> Option<f64> {
        self.profile.as_ref().map(|p| p(r))
    }

    /// Reproducible envelope check on grid nodes: max f/(Cφ).
    pub fn envelope_ratio(&self, grid: &RadialGrid) -> f64 {
        let w = ReferenceWeight { d: self.d };
        grid.nodes
            .iter()
            .map(|&r| spherical_mean(self, r) / (self.envelope_const * w.radial(r)))
            .fold(0.0, f64::max)
    }

    /// ‖f‖_H by adaptive quadrature of the radial integral.
    pub fn h_norm(&self, rho: f64) -> Result<f64> {
        if !(rho >= 1.0) {
            return Err(domain("rho must be >= 1"));
        }
        let d = self.d;
        let mut pts = vec![
            0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0,
        ];
        pts.extend(self.breakpoints.iter().copied());
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let f = |r: f64| {
            if r <= 0.0 {
                return 0.0;
            }
            let m = spherical_mean_abs_pow(self, r, rho);
            reference_weight(d, r) * m * r.powi(d as i32 - 1)
        };
        let v = integrate_value(f, &pts, Tolerance::rel(1e-11).with_abs(1e-300))?;
        Ok((sphere_area(d) * v).powf(1.0 / rho))
    }

    pub fn sample(&self, grid: &Arc<RadialGrid>) -> FieldSample {
        let values = grid
            .nodes
            .iter()
            .map(|&r| spherical_mean(self, r))
            .collect();
        FieldSample::new(grid.clone(), values, Some(self.singularity_order))
    }
}

fn sphere_points(d: usize) -> &'static [(f64, [f64; 3])] {
    use std::sync::OnceLock;
    static D2: OnceLock<Vec<(f64, [f64; 3])>> = OnceLock::new();
    static D3: OnceLock<Vec<(f64, [f64; 3])>> = OnceLock::new();
    if d == 2 {
        D2.get_or_init(|| {
            let n = 256;
            (0..n)
                .map(|i| {
                    let th = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                    (1.0 / n as f64, [th.cos(), th.sin(), 0.0])
                })
                .collect()
        })
    } else {
        D3.get_or_init(|| {
            // Gauss-Legendre in cos θ times a uniform rule in the azimuth
            let (xs, ws) = gauss_legendre(48);
            let m = 96;
            let mut out = Vec::with_capacity(xs.len() * m);
            for (c, w) in xs.iter().zip(&ws) {
                let s = (1.0 - c * c).sqrt();
                for j in 0..m {
                    let ph = 2.0 * PI * (j as f64 + 0.5) / m as f64;
                    out.push((w / (2.0 * m as f64), [s * ph.cos(), s * ph.sin(), *c]));
                }
            }
            out
        })
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        xs[i] = x;
        ws[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

fn sphere_mean_of(d: usize, r: f64, g: impl Fn(&SpacePoint) -> f64) -> f64 {
    sphere_points(d)
        .iter()
        .map(|(w, u)| w * g(&SpacePoint::from_array([r * u[0], r * u[1], r * u[2]], d)))
        .sum()
}

/// Average of f over the sphere of radius r.
pub fn spherical_mean(f: &TestFunction, r: f64) -> f64 {
    match f.profile(r) {
        Some(v) => v,
        None => sphere_mean_of(f.d, r, |x| f.eval(x)),
    }
}

fn spherical_mean_abs_pow(f: &TestFunction, r: f64, rho: f64) -> f64 {
    match f.profile(r) {
        Some(v) => v.abs().powf(rho),
        None => sphere_mean_of(f.d, r, |x| f.eval(x).abs().powf(rho)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// `None`: 512 nodes in d=2, 1024 in d=3.
    pub nodes: Option<usize>,
    /// `None`: 1e-4 in d=2, 1e-10 in d=3, where fields carry a 1/r singularity.
    pub r_min: Option<f64>,
    /// `None`: max(20, 8√T).
    pub r_max: Option<f64>,
}

impl GridSpec {
    pub fn build(&self, d: usize, horizon: f64) -> Result<RadialGrid> {
        let nodes = self.nodes.unwrap_or(if d == 3 { 1024 } else { 512 });
        let r_min = self.r_min.unwrap_or(if d == 3 { 1e-10 } else { 1e-4 });
        let r_max = self
            .r_max
            .unwrap_or_else(|| 20f64.max(8.0 * horizon.sqrt()));
        RadialGrid::new(d, nodes, r_min, r_max)
    }
}

/// Log-uniform radial grid with trapezoid weights for ∫ g(r) r^{d-1} dr.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub d: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// spacing in ln r
    pub h: f64,
}

impl RadialGrid {
    pub fn new(d: usize, n: usize, r_min: f64, r_max: f64) -> Result<Self> {
        if d != 2 && d != 3 {
            return Err(domain("grid dimension must be 2 or 3"));
        }
        if n < 8 || !(r_min > 0.0) || !(r_max > r_min) {
            return Err(domain("grid needs n >= 8 and 0 < r_min < r_max"));
        }
        let h = (r_max / r_min).ln() / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|i| r_min * (i as f64 * h).exp()).collect();
        let weights = nodes
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                end * h * r.powi(d as i32)
            })
            .collect();
        Ok(Self {
            d,
            nodes,
            weights,
            h,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn r_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn r_max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// ∫₀^∞ g(r) r^{d-1} dr for nodal values g, with a power-law tail below r_min.
    pub fn integrate(&self, g: &[f64]) -> f64 {
        let body: f64 = g.iter().zip(&self.weights).map(|(a, w)| a * w).sum();
        body + self.inner_tail(g[0], g[1], 0.0)
    }

    /// ∫₀^{r_min} of an integrand behaving like g0 (r/r0)^{-p}, p estimated from two nodes
    /// plus an extra known order.
    fn inner_tail(&self, g0: f64, g1: f64, extra_order: f64) -> f64 {
        if g0 == 0.0 {
            return 0.0;
        }
        let p = if g0 > 0.0 && g1 > 0.0 {
            -(g1 / g0).ln() / self.h
        } else {
            0.0
        };
        let denom = (self.d as f64 - p - extra_order).max(0.05);
        g0 * self.nodes[0].powi(self.d as i32) / denom
    }
}

/// Nodal samples of a radial function on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub grid: Arc<RadialGrid>,
    pub values: Vec<f64>,
    /// Leading singularity order at the origin (f ~ r^{-p}); `None` means estimate
    /// from the two innermost nodes.
    pub singularity_order: Option<f64>,
    slopes: Vec<f64>,
}

impl FieldSample {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>, singularity_order: Option<f64>) -> Self {
        assert_eq!(grid.len(), values.len());
        let slopes = pchip_slopes(&values);
        Self {
            grid,
            values,
            singularity_order,
            slopes,
        }
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.len();
        Self::new(grid, vec![0.0; n], Some(0.0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(
            self.grid.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
            self.singularity_order,
        )
    }

    pub fn zip_with(&self, other: &FieldSample, f: impl Fn(f64, f64) -> f64) -> Self {
        let vals = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.grid.clone(), vals, None)
    }

    fn local_order(&self) -> f64 {
        match self.singularity_order {
            Some(p) => p,
            None => {
                let (a, b) = (self.values[0], self.values[1]);
                if a > 0.0 && b > 0.0 {
                    -(b / a).ln() / self.grid.h
                } else {
                    0.0
                }
            }
        }
    }

    /// Monotone cubic interpolation in ln r; power-law extrapolation below r_min,
    /// zero beyond r_max.
    pub fn eval_radius(&self, r: f64) -> f64 {
        let g = &self.grid;
        let r0 = g.r_min();
        if r <= r0 {
            return self.values[0] * (r / r0).powf(-self.local_order());
        }
        if r > g.r_max() {
            return 0.0;
        }
        let pos = (r / r0).ln() / g.h;
        let i = (pos.floor() as usize).min(g.len() - 2);
        let s = pos - i as f64;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i], self.slopes[i + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * m1
    }

    pub fn eval(&self, x: &SpacePoint) -> f64 {
        self.eval_radius(x.norm())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Fritsch-Carlson slopes (per unit index step).
fn pchip_slopes(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let delta: Vec<f64> = (0..n - 1).map(|i| y[i + 1] - y[i]).collect();
    let mut m = vec![0.0; n];
    m[0] = delta[0];
    m[n - 1] = delta[n - 2];
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            m[i] = 2.0 / (1.0 / delta[i - 1] + 1.0 / delta[i]);
        }
    }
    m
}

/// ‖f‖_H for a grid sample, ρ ≥ 1.
pub fn h_norm(f: &FieldSample, rho: f64) -> Result<f64> {
    if !(rho >= 1.0) {
        return Err(domain("rho must be >= 1"));
    }
    let g = &f.grid;
    let integrand: Vec<f64> = g
        .nodes
        .iter()
        .zip(&f.values)
        .map(|(&r, &v)| reference_weight(g.d, r) * v.abs().powf(rho))
        .collect();
    let v = g.integrate(&integrand);
    Ok((sphere_area(g.d) * v).powf(1.0 / rho))
}

/// Dense linear map on grid samples: a weighted matrix plus the contribution
/// of the unresolved disc below r_min.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub grid: Arc<RadialGrid>,
    /// row-major n×n, entry (i, j) multiplies f(r_j)
    matrix: Vec<f64>,
    /// kernel values at the innermost column, for the tail below r_min
    heat_col0: Vec<f64>,
    corr_col0: Vec<f64>,
}

impl LinearMap {
    /// Σ c_k M_k over maps on the same grid.
    pub fn combine(terms: &[(f64, &LinearMap)]) -> Result<Self> {
        let first = terms.first().ok_or_else(|| domain("empty combination"))?.1;
        let n = first.grid.len();
        let mut out = LinearMap {
            grid: first.grid.clone(),
            matrix: vec![0.0; n * n],
            heat_col0: vec![0.0; n],
            corr_col0: vec![0.0; n],
        };
        for (c, m) in terms {
            if !Arc::ptr_eq(&m.grid, &first.grid) && *m.grid != *first.grid {
                return Err(domain("maps live on different grids"));
            }
            for (o, v) in out.matrix.iter_mut().zip(&m.matrix) {
                *o += c * v;
            }
            for (o, v) in out.heat_col0.iter_mut().zip(&m.heat_col0) {
                *o += c * v;
            }
            for (o, v) in out.corr_col0.iter_mut().zip(&m.corr_col0) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    fn tail_factor(&self, f: &[f64]) -> (f64, f64) {
        // ∫₀^{r_min} K(r_i, s) f(s) s^{d-1} ds ≈ K(r_i, r0) f(r0) r0^d / (d - p_K - p_f)
        let g = &self.grid;
        let (a, b) = (f[0], f[1]);
        let pf = if a > 0.0 && b > 0.0 {
            -(b / a).ln() / g.h
        } else {
            0.0
        };
        let r0d = g.nodes[0].powi(g.d as i32);
        let pk = if g.d == 3 { 1.0 } else { 0.0 };
        let dh = (g.d as f64 - pf).max(0.05);
        let dq = (g.d as f64 - pf - pk).max(0.05);
        (a * r0d / dh, a * r0d / dq)
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let (th, tq) = self.tail_factor(f);
        (0..n)
            .map(|i| {
                let row = &self.matrix[i * n..(i + 1) * n];
                let s: f64 = row.iter().zip(f).map(|(k, v)| k * v).sum();
                s + self.heat_col0[i] * th + self.corr_col0[i] * tq
            })
            .collect()
    }
}

/// Dense quadrature matrices of S^α_t on a grid.
#[derive(Debug, Clone)]
pub struct FlowOperator {
    pub t: f64,
    pub params: KernelParams,
    pub grid: Arc<RadialGrid>,
    map: LinearMap,
    /// weighted correction part alone, row-major
    corr: Vec<f64>,
}

impl FlowOperator {
    pub fn build(params: &KernelParams, grid: Arc<RadialGrid>, t: f64) -> Result<Self> {
        params.validate()?;
        if grid.d != params.d {
            return Err(domain("grid and kernel dimensions differ"));
        }
        if !(t > 0.0) {
            return Err(domain("time must be positive"));
        }
        let n = grid.len();
        let d = params.d;
        let area = sphere_area(d);
        let nodes = &grid.nodes;
        let rule = if d == 2 {
            Some(D2Rule::new(params.alpha, t)?)
        } else {
            None
        };
        let corr = |a: f64, b: f64| -> Result<f64> {
            match &rule {
                Some(r) => Ok(r.correction(a, b)),
                None => palpha_correction_tol(params, t, a, b, OPERATOR_REL_TOL),
            }
        };
        // symmetric kernels: fill the upper triangle in parallel
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut hk = vec![0.0; n - i];
                let mut qk = vec![0.0; n - i];
                for j in i..n {
                    hk[j - i] = heat_sphere_average(d, t, nodes[i], nodes[j]);
                    qk[j - i] = area * corr(nodes[i], nodes[j])?;
                }
                Ok((hk, qk))
            })
            .collect();
        let mut hkern = vec![0.0; n * n];
        let mut qkern = vec![0.0; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            let (hk, qk) = row?;
            for j in i..n {
                hkern[i * n + j] = hk[j - i];
                hkern[j * n + i] = hk[j - i];
                qkern[i * n + j] = qk[j - i];
                qkern[j * n + i] = qk[j - i];
            }
        }
        let heat_col0 = (0..n).map(|i| hkern[i * n]).collect();
        let corr_col0 = (0..n).map(|i| qkern[i * n]).collect();
        let raw = hkern.clone();
        for i in 0..n {
            for j in 0..n {
                hkern[i * n + j] *= grid.weights[j];
                qkern[i * n + j] *= grid.weights[j];
            }
        }
        refine_heat_cells(&grid, t, &raw, &mut hkern);
        drop(raw);
        for (h, q) in hkern.iter_mut().zip(&qkern) {
            *h += q;
        }
        let map = LinearMap {
            grid: grid.clone(),
            matrix: hkern,
            heat_col0,
            corr_col0,
        };
        Ok(Self {
            t,
            params: *params,
            grid,
            map,
            corr: qkern,
        })
    }

    pub fn map(&self) -> &LinearMap {
        &self.map
    }

    /// Returns (heat part, correction part) of S^α_t f at the nodes.
    pub fn apply_parts(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.len();
        let (_, tq) = self.map.tail_factor(f);
        let total = self.apply(f);
        let cp: Vec<f64> = (0..n)
            .map(|i| {
                let qr = &self.corr[i * n..(i + 1) * n];
                qr.iter().zip(f).map(|(k, v)| k * v).sum::<f64>() + self.map.corr_col0[i] * tq
            })
            .collect();
        let hp = total.iter().zip(&cp).map(|(a, b)| a - b).collect();
        (hp, cp)
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.map.apply(f)
    }

    /// Weighted correction-kernel row at node i, for sampling.
    pub fn corr_row(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.corr[i * n..(i + 1) * n]
    }

    /// Correction mass that row i sends into the disc below r_min.
    pub fn corr_inner_mass(&self, i: usize) -> f64 {
        let (_, tq) = self.map.tail_factor(&[1.0, 1.0]);
        self.map.corr_col0[i] * tq
    }
}

/// Product-integration weights for one time panel:
/// ∫₀^h S_τ g(t−τ) dτ ≈ W0 g(t) + W1 g(t−h) for g linear in time on the panel.
/// Gauss nodes in τ = h u⁴ keep S_0 out of the rule, which matters because
/// S_τ g is much smoother than g near the origin once τ exceeds r².
#[derive(Debug, Clone)]
pub struct PanelRule {
    pub h: f64,
    pub w0: LinearMap,
    pub w1: LinearMap,
}

pub const PANEL_NODES: usize = 6;

impl PanelRule {
    pub fn build(params: &KernelParams, grid: Arc<RadialGrid>, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(domain("panel length must be positive"));
        }
        let (gx, gw) = gauss_legendre(PANEL_NODES);
        let mut ops = Vec::with_capacity(PANEL_NODES);
        let mut c0 = Vec::with_capacity(PANEL_NODES);
        let mut c1 = Vec::with_capacity(PANEL_NODES);
        for (x, w) in gx.iter().zip(&gw) {
            let u = 0.5 * (x + 1.0);
            let tau = h * u.powi(4);
            let weight = 0.5 * w * 4.0 * h * u.powi(3);
            let frac = tau / h;
            ops.push(FlowOperator::build(params, grid.clone(), tau)?);
            c0.push(weight * (1.0 - frac));
            c1.push(weight * frac);
        }
        let t0: Vec<(f64, &LinearMap)> = c0.iter().zip(&ops).map(|(c, o)| (*c, &o.map)).collect();
        let t1: Vec<(f64, &LinearMap)> = c1.iter().zip(&ops).map(|(c, o)| (*c, &o.map)).collect();
        Ok(Self {
            h,
            w0: LinearMap::combine(&t0)?,
            w1: LinearMap::combine(&t1)?,
        })
    }
}

/// Cells wider than the heat kernel are integrated exactly against the
/// cubic (in ln r) interpolant instead of by node sampling, which would
/// overweight the Gaussian peak and make S_h^k unstable.
fn refine_heat_cells(grid: &RadialGrid, t: f64, raw: &[f64], weighted: &mut [f64]) {
    let n = grid.len();
    let d = grid.d;
    let sigma = (2.0 * t).sqrt();
    let nodes = &grid.nodes;
    let h = grid.h;
    let (gx, gw) = gauss_legendre(6);
    // node sampling is accurate only as a whole sum (aliasing cancels), so a row
    // is either left alone or refined across its entire Gaussian window
    let spacing = h.exp() - 1.0;
    weighted.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a = nodes[i];
        if a * spacing <= sigma {
            return;
        }
        for k in 0..n - 1 {
            let (lo, hi) = (nodes[k], nodes[k + 1]);
            if a < lo - 10.0 * sigma || a > hi + 10.0 * sigma {
                continue;
            }
            row[k] -= 0.5 * h * raw[i * n + k] * lo.powi(d as i32);
            row[k + 1] -= 0.5 * h * raw[i * n + k + 1] * hi.powi(d as i32);
            // four-node stencil around the cell, positions in units of h from node k
            let first = k.saturating_sub(1).min(n - 4);
            let stencil: Vec<f64> = (first..first + 4).map(|j| j as f64 - k as f64).collect();
            let mut acc = [0.0; 4];
            // only the part of the cell inside the Gaussian window carries weight
            let s_lo = lo.max(a - 10.0 * sigma);
            let s_hi = hi.min(a + 10.0 * sigma);
            let (th_lo, th_hi) = ((s_lo / lo).ln() / h, (s_hi / lo).ln() / h);
            let m = ((s_hi - s_lo) / (0.25 * sigma)).ceil().max(1.0) as usize;
            let dth = (th_hi - th_lo) / m as f64;
            let du = h * dth;
            for p in 0..m {
                for (x, w) in gx.iter().zip(&gw) {
                    let theta = th_lo + (p as f64 + 0.5 * (x + 1.0)) * dth;
                    let s = lo * (theta * h).exp();
                    let v = 0.5 * du * w * heat_sphere_average(d, t, a, s) * s.powi(d as i32);
                    for (q, &xq) in stencil.iter().enumerate() {
                        let l: f64 = stencil
                            .iter()
                            .filter(|&&xr| xr != xq)
                            .map(|&xr| (theta - xr) / (xq - xr))
                            .product();
                        acc[q] += l * v;
                    }
                }
            }
            for (q, v) in acc.into_iter().enumerate() {
                row[first + q] += v;
            }
        }
    });
}

/// Output singularity order of S^α_t f near the origin.
fn flow_order(d: usize) -> f64 {
    if d == 3 {
        1.0
    } else {
        0.0
    }
}

/// Semigroup S^α on a fixed grid with cached operators.
#[derive(Debug)]
pub struct Semigroup {
    pub params: KernelParams,
    pub grid: Arc<RadialGrid>,
    cache: Mutex<HashMap<u64, Arc<FlowOperator>>>,
    panels: Mutex<HashMap<u64, Arc<PanelRule>>>,
}

impl Semigroup {
    pub fn new(params: KernelParams, grid: Arc<RadialGrid>) -> Result<Self> {
        params.validate()?;
        if grid.d != params.d {
            return Err(domain("grid and kernel dimensions differ"));
        }
        Ok(Self {
            params,
            grid,
            cache: Mutex::new(HashMap::new()),
            panels: Mutex::new(HashMap::new()),
        })
    }

    pub fn operator(&self, t: f64) -> Result<Arc<FlowOperator>> {
        let key = t.to_bits();
        if let Some(op) = self.cache.lock().unwrap().get(&key) {
            return Ok(op.clone());
        }
        let op = Arc::new(FlowOperator::build(&self.params, self.grid.clone(), t)?);
        self.cache.lock().unwrap().insert(key, op.clone());
        Ok(op)
    }

    pub fn panel_rule(&self, h: f64) -> Result<Arc<PanelRule>> {
        let key = h.to_bits();
        if let Some(p) = self.panels.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(PanelRule::build(&self.params, self.grid.clone(), h)?);
        self.panels.lock().unwrap().insert(key, p.clone());
        Ok(p)
    }

    pub fn apply(&self, t: f64, f: &FieldSample) -> Result<FieldSample> {
        let op = self.operator(t)?;
        Ok(FieldSample::new(
            self.grid.clone(),
            op.apply(&f.values),
            Some(flow_order(self.params.d)),
        ))
    }

    /// (heat part, correction part) as samples.
    pub fn apply_parts(&self, t: f64, f: &FieldSample) -> Result<(FieldSample, FieldSample)> {
        let op = self.operator(t)?;
        let (h, c) = op.apply_parts(&f.values);
        Ok((
            FieldSample::new(self.grid.clone(), h, Some(0.0)),
            FieldSample::new(self.grid.clone(), c, Some(flow_order(self.params.d))),
        ))
    }
}

/// S_t f by radial quadrature with the exact angular heat factor.
pub fn apply_heat(t: f64, f: &FieldSample) -> Result<FieldSample> {
    if !(t > 0.0) {
        return Err(domain("time must be positive"));
    }
    let g = f.grid.clone();
    let n = g.len();
    let pf = {
        let (a, b) = (f.values[0], f.values[1]);
        if a > 0.0 && b > 0.0 {
            -(b / a).ln() / g.h
        } else {
            0.0
        }
    };
    let tail = f.values[0] * g.nodes[0].powi(g.d as i32) / (g.d as f64 - pf).max(0.05);
    let raw: Vec<f64> = (0..n * n)
        .map(|k| heat_sphere_average(g.d, t, g.nodes[k / n], g.nodes[k % n]))
        .collect();
    let mut weighted: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(k, v)| v * g.weights[k % n])
        .collect();
    refine_heat_cells(&g, t, &raw, &mut weighted);
    let vals = (0..n)
        .map(|i| {
            let row = &weighted[i * n..(i + 1) * n];
            let s: f64 = row.iter().zip(&f.values).map(|(w, v)| w * v).sum();
            s + raw[i * n] * tail
        })
        .collect();
    Ok(FieldSample::new(g, vals, Some(0.0)))
}

/// S̄_t f(x) = t^{-1/2} φ(x) e^{-|x|²/4t} ⟨f, φ e^{-|·|²/4t}⟩ (rank one).
pub fn apply_pbar(t: f64, f: &FieldSample) -> Result<FieldSample> {
    if !(t > 0.0) {
        return Err(domain("time must be positive"));
    }
    let g = f.grid.clone();
    let d = g.d;
    let integrand: Vec<f64> = g
        .nodes
        .iter()
        .zip(&f.values)
        .map(|(&r, &v)| v * reference_weight(d, r) * (-r * r / (4.0 * t)).exp())
        .collect();
    let inner = sphere_area(d) * g.integrate(&integrand);
    let vals = g
        .nodes
        .iter()
        .map(|&r| t.powf(-0.5) * reference_weight(d, r) * (-r * r / (4.0 * t)).exp() * inner)
        .collect();
    Ok(FieldSample::new(g, vals, Some(half_dim(d))))
}

/// S^α_t f built without caching.
pub fn apply_palpha(params: &KernelParams, t: f64, f: &FieldSample) -> Result<FieldSample> {
    let op = FlowOperator::build(params, f.grid.clone(), t)?;
    Ok(FieldSample::new(
        f.grid.clone(),
        op.apply(&f.values),
        Some(flow_order(params.d)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::palpha_kernel;

    fn grid(d: usize) -> Arc<RadialGrid> {
        Arc::new(GridSpec::default().build(d, 1.0).unwrap())
    }

    #[test]
    fn ball_norm_d3() {
        let f = TestFunction::radial_fn(
            3,
            2.0,
            "ball",
            |r| if r <= 1.0 { 1.0 } else { 0.0 },
            1.0,
            0.0,
        )
        .with_breakpoints(&[1.0]);
        for rho in [1.0, 1.6, 2.0, 3.5] {
            let n = f.h_norm(rho).unwrap();
            assert!((n - (2.0 * PI).powf(1.0 / rho)).abs() < 1e-9, "{rho} {n}");
        }
    }

    #[test]
    fn grid_norm_matches_adaptive_norm() {
        for (d, rho) in [(2, 2.0), (3, 1.6)] {
            let g = grid(d);
            for f in [
                TestFunction::gaussian(d, rho, 1.0, 1.0),
                TestFunction::weight_power(d, rho, 0.5, 0.7),
            ] {
                let a = f.h_norm(rho).unwrap();
                let b = h_norm(&f.sample(&g), rho).unwrap();
                assert!((a / b - 1.0).abs() < 1e-8, "{d} {}: {a} {b}", f.label);
            }
        }
    }

    #[test]
    fn norm_zero_and_homogeneous() {
        let g = grid(2);
        let f = TestFunction::gaussian(2, 2.0, 1.0, 1.0).sample(&g);
        assert_eq!(h_norm(&FieldSample::zeros(g.clone()), 2.0).unwrap(), 0.0);
        let n1 = h_norm(&f, 2.0).unwrap();
        let n3 = h_norm(&f.map(|v| 3.0 * v), 2.0).unwrap();
        assert!((n3 / n1 - 3.0).abs() < 1e-12);
        assert!(h_norm(&f, 0.5).is_err());
    }

    #[test]
    fn spherical_means() {
        let f = TestFunction::gaussian(3, 1.6, 1.0, 1.0);
        assert_eq!(spherical_mean(&f, 0.7), (-0.49f64 / 4.0).exp());
        for d in [2, 3] {
            let odd = TestFunction::general(d, 2.0, "x1", |x| x.coords()[0], 1.0);
            assert!(spherical_mean(&odd, 1.3).abs() < 1e-14);
            let half = TestFunction::general(
                d,
                2.0,
                "half",
                |x| if x.coords()[1] > 0.0 { 1.0 } else { 0.0 },
                1.0,
            );
            assert!((spherical_mean(&half, 2.0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_constants_hold() {
        for d in [2, 3] {
            let g = grid(d);
            for f in [
                TestFunction::gaussian(d, 2.0, 2.0, 0.5),
                TestFunction::weight_power(d, 2.0, 0.3, 1.0),
                TestFunction::ball(d, 2.0, 1.5, 0.1),
            ] {
                let r = f.envelope_ratio(&g);
                assert!(r <= 1.0 && r > 0.9, "{} {r}", f.label);
            }
        }
    }

    #[test]
    fn heat_of_gaussian_is_gaussian() {
        for d in [2, 3] {
            let g = grid(d);
            let sigma = 0.8;
            let t = 0.3;
            let f = TestFunction::gaussian(d, 2.0, 1.0, sigma).sample(&g);
            let out = apply_heat(t, &f).unwrap();
            for (i, &r) in g.nodes.iter().enumerate() {
                let want = (sigma / (sigma + t)).powf(d as f64 / 2.0)
                    * (-r * r / (4.0 * (sigma + t))).exp();
                assert!(
                    (out.values[i] - want).abs() < 1e-11,
                    "d {d} r {r}: {} {want}",
                    out.values[i]
                );
            }
        }
    }

    #[test]
    fn heat_flow_estimates() {
        for d in [2, 3] {
            let g = grid(d);
            // S_t φ ≤ C φ: the ratio stays bounded up to the innermost node
            let phi = TestFunction::weight_power(d, 2.0, 1.0, 1e6).sample(&g);
            let out = apply_heat(0.5, &phi).unwrap();
            let ratio: Vec<f64> = g
                .nodes
                .iter()
                .zip(&out.values)
                .map(|(&r, v)| v / reference_weight(d, r))
                .collect();
            let c = ratio.iter().cloned().fold(0.0, f64::max);
            assert!(c < 10.0 && ratio[0] < 1e-1);
            // φ^κ: maximum of S_t φ^κ at the centre
            let pk = TestFunction::weight_power(d, 2.0, 0.5, 1e6).sample(&g);
            let out = apply_heat(0.5, &pk).unwrap();
            assert!(out.values[0] >= out.max_abs() * (1.0 - 1e-9));
        }
    }

    #[test]
    fn pbar_of_phi_matches_one_dimensional_oracle() {
        for d in [2, 3] {
            let g = grid(d);
            let t = 0.4;
            let phi = TestFunction::weight_power(d, 2.0, 1.0, 1e9).sample(&g);
            let out = apply_pbar(t, &phi).unwrap();
            // ⟨φ, φ e^{-r²/4t}⟩ = |S| ∫ e^{-r²/4t} dr = |S| √(π t)
            let inner = sphere_area(d) * (PI * t).sqrt();
            let r = g.nodes[100];
            let want = t.powf(-0.5) * reference_weight(d, r) * (-r * r / (4.0 * t)).exp() * inner;
            assert!(
                (out.values[100] / want - 1.0).abs() < 1e-6,
                "{d} {} {want}",
                out.values[100]
            );
        }
    }

    #[test]
    fn pbar_norm_vanishes_as_t_decreases() {
        let g = grid(2);
        let f = TestFunction::gaussian(2, 2.0, 1.0, 1.0).sample(&g);
        let norms: Vec<f64> = (1..10)
            .map(|k| h_norm(&apply_pbar(0.5f64.powi(k), &f).unwrap(), 2.0).unwrap())
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]));
        assert!(norms[8] < 0.2 * norms[0]);
    }

    #[test]
    fn d3_flow_matches_brute_force() {
        let g = grid(3);
        let p = KernelParams::new(3, 0.0).unwrap();
        let f = TestFunction::gaussian(3, 1.6, 1.0, 1.0);
        let out = apply_palpha(&p, 1.0, &f.sample(&g)).unwrap();
        let i = g.nodes.iter().position(|&r| r >= 1.0).unwrap();
        let a = g.nodes[i];
        let x = SpacePoint::on_axis(3, a);
        let inner = |b: f64| {
            if b <= 0.0 {
                return 0.0;
            }
            integrate_value(
                |c| {
                    let y = SpacePoint::at_angle(3, b, c);
                    2.0 * PI * b * b * palpha_kernel(&p, 1.0, &x, &y).unwrap().value * f.eval(&y)
                },
                &[-1.0, 0.0, 1.0],
                Tolerance::rel(1e-10),
            )
            .unwrap()
        };
        let want = integrate_value(
            inner,
            &[0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            Tolerance::rel(1e-9),
        )
        .unwrap();
        assert!(
            (out.values[i] / want - 1.0).abs() < 1e-5,
            "{} {want}",
            out.values[i]
        );
    }

    #[test]
    fn large_alpha_flow_tends_to_heat() {
        let g = grid(3);
        let f = TestFunction::gaussian(3, 1.6, 1.0, 1.0).sample(&g);
        let heat = apply_heat(0.5, &f).unwrap();
        let mut last = f64::INFINITY;
        for alpha in [1.0, 10.0, 100.0, 1000.0] {
            let out = apply_palpha(&KernelParams::new(3, alpha).unwrap(), 0.5, &f).unwrap();
            let diff = h_norm(&out.zip_with(&heat, |a, b| a - b), 1.6).unwrap();
            assert!(diff < last);
            assert!(out.values.iter().zip(&heat.values).all(|(a, b)| a >= b));
            last = diff;
        }
        assert!(last < 1e-3 * h_norm(&heat, 1.6).unwrap());
    }

    #[test]
    fn operator_heat_part_matches_apply_heat() {
        let g = Arc::new(RadialGrid::new(2, 128, 1e-4, 20.0).unwrap());
        let sg = Semigroup::new(KernelParams::new(2, 0.0).unwrap(), g.clone()).unwrap();
        let f = TestFunction::gaussian(2, 2.0, 1.0, 1.0).sample(&g);
        let (h, c) = sg.apply_parts(0.25, &f).unwrap();
        let direct = apply_heat(0.25, &f).unwrap();
        for i in 0..g.len() {
            assert!((h.values[i] - direct.values[i]).abs() < 1e-13);
            assert!(c.values[i] >= 0.0);
        }
        assert!(Arc::ptr_eq(
            &sg.operator(0.25).unwrap(),
            &sg.operator(0.25).unwrap()
        ));
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_extrapolates() {
        let g = grid(3);
        let f = TestFunction::weight_power(3, 1.6, 1.0, 1.0).sample(&g);
        assert!((f.eval_radius(g.nodes[17]) / f.values[17] - 1.0).abs() < 1e-14);
        let r = 0.5 * g.r_min();
        let want = (-r * r / 4.0).exp() / r;
        assert!((f.eval_radius(r) / want - 1.0).abs() < 1e-6);
        let mid = (g.nodes[300] * g.nodes[301]).sqrt();
        let want = (-mid * mid / 4.0).exp() / mid;
        assert!((f.eval_radius(mid) / want - 1.0).abs() < 1e-6);
    }
}
