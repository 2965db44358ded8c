//! Heat kernel, the rank-one comparison kernel P̄ and the one-point-potential
//! kernels P^α in d = 2, 3.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::quad::{integrate_value, Tolerance};
use crate::specfun::{erfcx, erfcx_gap, i0_scaled, k0_tilde, k0_tilde_fast, volterra_ln, Volterra};

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Relative tolerance used for the d = 2 correction integrals.
pub const D2_REL_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub d: usize,
    pub alpha: f64,
}

impl KernelParams {
    pub fn new(d: usize, alpha: f64) -> Result<Self> {
        let p = Self { d, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d != 2 && self.d != 3 {
            return Err(domain(format!("dimension must be 2 or 3, got {}", self.d)));
        }
        if !self.alpha.is_finite() {
            return Err(domain("alpha must be finite"));
        }
        Ok(())
    }
}

/// A point of R^d (d = 2 or 3). Kernels with a point potential reject the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacePoint {
    coords: [f64; 3],
    dim: usize,
}

impl SpacePoint {
    pub fn new(coords: &[f64]) -> Result<Self> {
        let p = Self::any(coords)?;
        if !(p.norm() > 0.0) {
            return Err(domain("point must differ from the origin"));
        }
        Ok(p)
    }

    /// Like `new` but admits the origin (used by the plain heat kernel).
    pub fn any(coords: &[f64]) -> Result<Self> {
        let dim = coords.len();
        if dim != 2 && dim != 3 {
            return Err(domain(format!(
                "points must have 2 or 3 coordinates, got {dim}"
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(domain("non-finite coordinate"));
        }
        let mut c = [0.0; 3];
        c[..dim].copy_from_slice(coords);
        Ok(Self { coords: c, dim })
    }

    pub fn origin(d: usize) -> Self {
        Self {
            coords: [0.0; 3],
            dim: d,
        }
    }

    /// Point at radius r along the first axis.
    pub fn on_axis(d: usize, r: f64) -> Self {
        let mut c = [0.0; 3];
        c[0] = r;
        Self { coords: c, dim: d }
    }

    /// Point at radius r with angle θ to the first axis (in the 1-2 plane).
    pub fn at_angle(d: usize, r: f64, cos_angle: f64) -> Self {
        let s = (1.0 - cos_angle * cos_angle).max(0.0).sqrt();
        let mut c = [0.0; 3];
        c[0] = r * cos_angle;
        c[1] = r * s;
        Self { coords: c, dim: d }
    }

    pub(crate) fn from_array(coords: [f64; 3], dim: usize) -> Self {
        Self { coords, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim]
    }

    pub(crate) fn array(&self) -> [f64; 3] {
        self.coords
    }

    pub fn norm(&self) -> f64 {
        self.coords().iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dist2(&self, other: &SpacePoint) -> f64 {
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn shifted(&self, axis: usize, h: f64) -> Self {
        let mut c = *self;
        c.coords[axis] += h;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelValue {
    pub value: f64,
    pub heat: f64,
    /// The α-independent image term (d = 3 only; zero in d = 2).
    pub image: f64,
    /// The remaining α-dependent correction.
    pub alpha_corr: f64,
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(domain(format!("time must be positive, got {t}")));
    }
    Ok(())
}

fn check_dim(d: usize) -> Result<()> {
    if d != 2 && d != 3 {
        return Err(domain(format!("dimension must be 2 or 3, got {d}")));
    }
    Ok(())
}

/// Surface area of the unit sphere in R^d.
pub fn sphere_area(d: usize) -> f64 {
    if d == 2 {
        2.0 * PI
    } else {
        4.0 * PI
    }
}

/// Reference weight φ(r) = r^{-(d-1)/2}.
pub fn reference_weight(d: usize, r: f64) -> f64 {
    if d == 2 {
        1.0 / r.sqrt()
    } else {
        1.0 / r
    }
}

/// P(t; r) = (4πt)^{-d/2} exp(-r²/4t).
pub fn radial_heat_kernel(d: usize, t: f64, r: f64) -> Result<f64> {
    check_dim(d)?;
    check_time(t)?;
    if !(r >= 0.0) {
        return Err(domain("radius must be nonnegative"));
    }
    Ok(radial_heat_unchecked(d, t, r))
}

pub(crate) fn radial_heat_unchecked(d: usize, t: f64, r: f64) -> f64 {
    (4.0 * PI * t).powf(-(d as f64) / 2.0) * (-r * r / (4.0 * t)).exp()
}

pub fn heat_kernel(d: usize, t: f64, x: &SpacePoint, y: &SpacePoint) -> Result<f64> {
    check_dim(d)?;
    check_time(t)?;
    if x.dim() != d || y.dim() != d {
        return Err(domain("point dimension mismatch"));
    }
    Ok(radial_heat_unchecked(d, t, x.dist2(y).sqrt()))
}

/// P̄ on radii: t^{-1/2} φ(a) φ(b) e^{-a²/4t} e^{-b²/4t}.
pub fn pbar_radial(d: usize, t: f64, a: f64, b: f64) -> f64 {
    t.powf(-0.5)
        * reference_weight(d, a)
        * reference_weight(d, b)
        * (-(a * a + b * b) / (4.0 * t)).exp()
}

pub fn pbar_kernel(d: usize, t: f64, x: &SpacePoint, y: &SpacePoint) -> Result<f64> {
    check_dim(d)?;
    check_time(t)?;
    let (a, b) = (x.norm(), y.norm());
    if !(a > 0.0 && b > 0.0) {
        return Err(domain("P-bar is singular at the origin"));
    }
    Ok(pbar_radial(d, t, a, b))
}

/// Sphere integral of the heat kernel: ∫_{S^{d-1}} P(t; a e, b ω) dσ(ω).
pub fn heat_sphere_average(d: usize, t: f64, a: f64, b: f64) -> f64 {
    let z = a * b / (2.0 * t);
    let g = (-(a - b) * (a - b) / (4.0 * t)).exp();
    if d == 2 {
        g * i0_scaled(z) / (2.0 * t)
    } else {
        let shape = if z < 1e-8 {
            1.0 - z
        } else {
            -(-2.0 * z).exp_m1() / (2.0 * z)
        };
        (4.0 * PI * t).powf(-1.5) * 4.0 * PI * g * shape
    }
}

fn d3_correction_parts(alpha: f64, t: f64, a: f64, b: f64) -> (f64, f64) {
    let r = a + b;
    let y = r / (2.0 * t.sqrt());
    let pref = 2.0 * t / (a * b) * (4.0 * PI * t).powf(-1.5);
    let image = pref * (-y * y).exp();
    if alpha == 0.0 {
        return (image, 0.0);
    }
    let w = 4.0 * PI * alpha * t.sqrt();
    let z = y + w;
    let total = if z >= 0.0 {
        pref * (-y * y).exp() * (erfcx_gap(z) + SQRT_PI * y * erfcx(z))
    } else {
        let inner = 2.0 * (z * z - y * y).exp() - (-y * y).exp() * erfcx(-z);
        pref * ((-y * y).exp() + SQRT_PI * (-w) * inner)
    };
    (image, total - image)
}

fn d2_breakpoints(c: f64) -> Vec<f64> {
    let mut pts = vec![0.0];
    for k in [1e-3, 1e-2, 0.1, 0.25, 1.0, 4.0] {
        let p = k / c.max(1e-300);
        if p < 0.5 && p > 1e-12 {
            pts.push(p);
        }
    }
    pts.push(0.5);
    let floor = (c / 60.0).max(1e-14);
    let mut gap = 0.1;
    while gap > floor {
        pts.push(1.0 - gap);
        gap *= 0.1;
    }
    pts.push(1.0);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

/// Q^α in d = 2 divided by exp(-(a+b)²/4t).
fn d2_correction_scaled(alpha: f64, t: f64, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    let c = (a + b) * (a + b) / (4.0 * t);
    let z = a * b / (2.0 * t);
    let lx0 = -alpha + t.ln();
    let hat = |rho: f64| -> f64 {
        let s = 1.0 - rho;
        if s <= 0.0 {
            return 0.0;
        }
        let e = (-c * rho / s).exp();
        if e == 0.0 {
            return 0.0;
        }
        e / s.sqrt() * k0_tilde(z / s).unwrap_or(0.0)
    };
    let h0 = k0_tilde(z)?;
    let f = |rho: f64| {
        if rho <= 0.0 {
            return 0.0;
        }
        (hat(rho) - h0) / rho * volterra_ln(Volterra::N, lx0 + rho.ln())
    };
    let pts = d2_breakpoints(c);
    let head = h0 * volterra_ln(Volterra::Nu, lx0);
    let scale = head.abs().max(1e-300);
    let tol = Tolerance::rel(rel_tol).with_abs(rel_tol * scale * 1e-3);
    let tail = integrate_value(f, &pts, tol)?;
    let pref = (PI * t / (a * b)).sqrt() / (2.0 * PI * t);
    Ok(pref * (head + tail))
}

/// Fixed quadrature rule for the d = 2 correction at one (α, t), shared by all
/// radius pairs: trapezoid in σ = ln(ρ/(1−ρ)), where both the ρ ≈ 1/c and the
/// 1 − ρ ≈ c features have unit width.
#[derive(Debug, Clone)]
pub struct D2Rule {
    t: f64,
    /// ρ/(1−ρ) and 1/(1−ρ) at the nodes, increasing in ρ
    odds: Vec<f64>,
    inv: Vec<f64>,
    /// trapezoid weight times N(x0 ρ)
    wn: Vec<f64>,
    /// suffix sums of wn
    tail: Vec<f64>,
    nu0: f64,
}

impl D2Rule {
    const STEP: f64 = 0.25;
    const SPAN: f64 = 34.0;

    pub fn new(alpha: f64, t: f64) -> Result<Self> {
        check_time(t)?;
        let lx0 = -alpha + t.ln();
        let n = (2.0 * Self::SPAN / Self::STEP) as usize + 1;
        let mut odds = Vec::with_capacity(n);
        let mut inv = Vec::with_capacity(n);
        let mut wn = Vec::with_capacity(n);
        for k in 0..n {
            let sigma = -Self::SPAN + k as f64 * Self::STEP;
            let e = sigma.exp();
            let one_minus = 1.0 / (1.0 + e);
            let ln_rho = sigma - (1.0 + e).ln();
            odds.push(e);
            inv.push(1.0 + e);
            // dρ/ρ = (1−ρ) dσ
            wn.push(Self::STEP * one_minus * volterra_ln(Volterra::N, lx0 + ln_rho));
        }
        let mut tail = vec![0.0; n + 1];
        for k in (0..n).rev() {
            tail[k] = tail[k + 1] + wn[k];
        }
        Ok(Self {
            t,
            odds,
            inv,
            wn,
            tail,
            nu0: volterra_ln(Volterra::Nu, lx0),
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Q^α(t; a, b) in d = 2.
    pub fn correction(&self, a: f64, b: f64) -> f64 {
        let t = self.t;
        let c = (a + b) * (a + b) / (4.0 * t);
        if c > 745.0 {
            return 0.0;
        }
        let z = a * b / (2.0 * t);
        let h0 = k0_tilde_fast(z);
        let mut acc = h0 * self.nu0;
        let mut k = 0;
        while k < self.odds.len() {
            let x = c * self.odds[k];
            if x > 745.0 {
                break;
            }
            let inv = self.inv[k];
            let hat = (-x).exp() * inv.sqrt() * k0_tilde_fast(z * inv);
            acc += (hat - h0) * self.wn[k];
            k += 1;
        }
        acc -= h0 * self.tail[k];
        let pref = (PI * t / (a * b)).sqrt() / (2.0 * PI * t);
        (-c).exp() * pref * acc
    }
}

/// Q^α(t; rx, ry): P^α = P + Q^α, with explicit relative tolerance for d = 2.
pub fn palpha_correction_tol(
    params: &KernelParams,
    t: f64,
    rx: f64,
    ry: f64,
    rel_tol: f64,
) -> Result<f64> {
    params.validate()?;
    check_time(t)?;
    if !(rx > 0.0 && ry > 0.0) {
        return Err(domain("radii must be positive"));
    }
    if params.d == 3 {
        let (i, c) = d3_correction_parts(params.alpha, t, rx, ry);
        return Ok(i + c);
    }
    let c = (rx + ry) * (rx + ry) / (4.0 * t);
    if c > 745.0 {
        return Ok(0.0);
    }
    Ok((-c).exp() * d2_correction_scaled(params.alpha, t, rx, ry, rel_tol)?)
}

pub fn palpha_correction(params: &KernelParams, t: f64, rx: f64, ry: f64) -> Result<f64> {
    palpha_correction_tol(params, t, rx, ry, D2_REL_TOL)
}

/// d = 3 correction from the defining u-integral by adaptive quadrature.
pub fn palpha_correction_d3_quadrature(alpha: f64, t: f64, a: f64, b: f64) -> Result<f64> {
    check_time(t)?;
    let r = a + b;
    let image = 2.0 * t / (a * b) * radial_heat_unchecked(3, t, r);
    if alpha == 0.0 {
        return Ok(image);
    }
    let k = 4.0 * PI * alpha;
    // log of e^{-ku} P(t; u + r) relative to P(t; r)
    let expo = |u: f64| -k * u - (u * u + 2.0 * u * r) / (4.0 * t);
    // where the exponent is maximal and where it has dropped by ~37 units
    let umax = (-2.0 * t * k - r).max(0.0);
    let peak = expo(umax);
    let mut hi = umax + 2.0 * t.sqrt();
    while expo(hi) > peak - 40.0 {
        hi = umax + 2.0 * (hi - umax);
    }
    let mut pts = vec![0.0];
    if umax > 0.0 {
        pts.push(umax);
    }
    pts.push(hi);
    let f = |u: f64| (expo(u) - peak).exp();
    let val = integrate_value(f, &pts, Tolerance::rel(1e-13))?;
    let integral = val * peak.exp() * radial_heat_unchecked(3, t, r);
    Ok(image - 2.0 * t * k / (a * b) * integral)
}

pub fn palpha_kernel(
    params: &KernelParams,
    t: f64,
    x: &SpacePoint,
    y: &SpacePoint,
) -> Result<KernelValue> {
    params.validate()?;
    check_time(t)?;
    let d = params.d;
    if x.dim() != d || y.dim() != d {
        return Err(domain("point dimension mismatch"));
    }
    let (a, b) = (x.norm(), y.norm());
    if !(a > 0.0 && b > 0.0) {
        return Err(domain("P^alpha is defined off the origin only"));
    }
    let heat = radial_heat_unchecked(d, t, x.dist2(y).sqrt());
    let (image, alpha_corr) = if d == 3 {
        d3_correction_parts(params.alpha, t, a, b)
    } else {
        (0.0, palpha_correction(params, t, a, b)?)
    };
    let value = heat + image + alpha_corr;
    if !value.is_finite() {
        return Err(domain(format!(
            "P^alpha(t={t}) is not representable in f64 (alpha = {})",
            params.alpha
        )));
    }
    Ok(KernelValue {
        value,
        heat,
        image,
        alpha_corr,
    })
}

/// Data-parallel evaluation over a list of (t, x, y).
pub fn palpha_batch(
    params: &KernelParams,
    points: &[(f64, SpacePoint, SpacePoint)],
) -> Vec<Result<KernelValue>> {
    points
        .par_iter()
        .map(|(t, x, y)| palpha_kernel(params, *t, x, y))
        .collect()
}

/// m^α(t, x) = ∫ P^α(t; x, y) dy as a function of r = |x|.
pub fn palpha_total_mass_radial(params: &KernelParams, t: f64, r: f64) -> Result<f64> {
    params.validate()?;
    check_time(t)?;
    if !(r > 0.0) {
        return Err(domain("radius must be positive"));
    }
    if params.d == 3 {
        let z0 = r / (2.0 * t.sqrt());
        let w = 4.0 * PI * params.alpha * t.sqrt();
        let e0 = (-z0 * z0).exp();
        let diff = if w.abs() < 1e-4 {
            let f0 = erfcx(z0);
            let f1 = 2.0 * z0 * f0 - 2.0 / SQRT_PI;
            let f2 = 2.0 * f0 + 2.0 * z0 * f1;
            let f3 = 4.0 * f1 + 2.0 * z0 * f2;
            e0 * -(f1 + f2 * w / 2.0 + f3 * w * w / 6.0)
        } else {
            let z1 = z0 + w;
            let far = if z1 >= 0.0 {
                e0 * erfcx(z1)
            } else {
                2.0 * (z1 * z1 - z0 * z0).exp() - e0 * erfcx(-z1)
            };
            (e0 * erfcx(z0) - far) / w
        };
        return Ok(1.0 + t.sqrt() / r * diff);
    }
    let lx = -params.alpha;
    let f = |s: f64| {
        if s <= 0.0 || s >= t {
            return 0.0;
        }
        volterra_ln(Volterra::Nu, lx + (t - s).ln()) * (-r * r / (4.0 * s)).exp() / s
    };
    let mut pts = vec![0.0];
    let s_on = r * r / (4.0 * 700.0);
    if s_on < t {
        pts.push(s_on);
    }
    let mut gap = 0.5;
    while gap > 1e-12 {
        if t * (1.0 - gap) > s_on {
            pts.push(t * (1.0 - gap));
        }
        gap *= 0.1;
    }
    pts.push(t);
    let v = integrate_value(f, &pts, Tolerance::rel(1e-11).with_abs(1e-300))?;
    Ok(1.0 + v)
}

pub fn palpha_total_mass(params: &KernelParams, t: f64, x: &SpacePoint) -> Result<f64> {
    palpha_total_mass_radial(params, t, x.norm())
}

/// Fourth-order central-difference estimate of (∂_t − Δ_x) P^α, relative to P^α.
pub fn heat_residual(
    params: &KernelParams,
    t: f64,
    x: &SpacePoint,
    y: &SpacePoint,
    h_t: f64,
    h_x: f64,
) -> Result<f64> {
    params.validate()?;
    if !(h_t > 0.0 && h_x > 0.0) || !(t > 2.0 * h_t) {
        return Err(domain("need t > 2 h_t > 0 and h_x > 0"));
    }
    if x.norm() <= 2.0 * h_x {
        return Err(domain("stencil crosses the origin"));
    }
    let p = |t: f64, x: &SpacePoint| palpha_kernel(params, t, x, y).map(|v| v.value);
    let f0 = p(t, x)?;
    let dt = (-p(t + 2.0 * h_t, x)? + 8.0 * p(t + h_t, x)? - 8.0 * p(t - h_t, x)?
        + p(t - 2.0 * h_t, x)?)
        / (12.0 * h_t);
    let mut lap = 0.0;
    for axis in 0..params.d {
        let fp1 = p(t, &x.shifted(axis, h_x))?;
        let fm1 = p(t, &x.shifted(axis, -h_x))?;
        let fp2 = p(t, &x.shifted(axis, 2.0 * h_x))?;
        let fm2 = p(t, &x.shifted(axis, -2.0 * h_x))?;
        lap += (-fp2 + 16.0 * fp1 - 30.0 * f0 + 16.0 * fm1 - fm2) / (12.0 * h_x * h_x);
    }
    Ok((dt - lap) / f0.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(d: usize, alpha: f64) -> KernelParams {
        KernelParams::new(d, alpha).unwrap()
    }

    #[test]
    fn heat_examples() {
        let t = 1.0 / (4.0 * PI);
        let x = SpacePoint::new(&[0.3, 0.1, -0.2]).unwrap();
        assert!((heat_kernel(3, t, &x, &x).unwrap() - 1.0).abs() < 1e-15);
        let t: f64 = 0.7;
        let x = SpacePoint::new(&[1.0, 0.0]).unwrap();
        let y = SpacePoint::new(&[1.0 + 2.0 * t.sqrt(), 0.0]).unwrap();
        let want = (-1.0f64).exp() / (4.0 * PI * t);
        assert!((heat_kernel(2, t, &x, &y).unwrap() / want - 1.0).abs() < 1e-14);
        assert!(heat_kernel(2, 0.0, &x, &y).is_err());
        let r = radial_heat_kernel(2, t, x.dist2(&y).sqrt()).unwrap();
        assert_eq!(r, heat_kernel(2, t, &x, &y).unwrap());
        assert_eq!(
            radial_heat_kernel(3, 0.5, 0.0).unwrap(),
            (2.0 * PI).powf(-1.5)
        );
    }

    #[test]
    fn heat_mass_is_one() {
        // radial oracle: 4π ∫ r² P(t; r) dr
        let t = 0.37;
        let v = integrate_value(
            |r| 4.0 * PI * r * r * radial_heat_unchecked(3, t, r),
            &[0.0, 1.0, 3.0, 12.0],
            Tolerance::rel(1e-13),
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pbar_examples() {
        let x = SpacePoint::on_axis(3, 1.0);
        let y = SpacePoint::at_angle(3, 1.0, 0.3);
        assert!((pbar_kernel(3, 1.0, &x, &y).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let x = SpacePoint::on_axis(2, 4.0);
        let y = SpacePoint::on_axis(2, 1.0);
        let want = 0.5 * 0.5 * (-1.0f64).exp() * (-1.0f64 / 16.0).exp();
        assert!((pbar_kernel(2, 4.0, &x, &y).unwrap() - want).abs() < 1e-15);
        assert_eq!(
            pbar_kernel(2, 4.0, &x, &y).unwrap(),
            pbar_kernel(2, 4.0, &y, &x).unwrap()
        );
        assert!(pbar_kernel(2, 1.0, &SpacePoint::origin(2), &y).is_err());
    }

    #[test]
    fn d3_alpha_zero_closed_form() {
        let x = SpacePoint::on_axis(3, 1.0);
        let v = palpha_kernel(&kp(3, 0.0), 1.0, &x, &x).unwrap();
        let want = (4.0 * PI).powf(-1.5) * (1.0 + 2.0 * (-1.0f64).exp());
        assert!((v.value / want - 1.0).abs() < 1e-14);
        assert_eq!(v.alpha_corr, 0.0);
    }

    #[test]
    fn d3_closed_form_matches_quadrature() {
        for &alpha in &[-1.0, -0.2, 0.3, 1.0, 10.0] {
            for &(t, a, b) in &[(1.0, 1.0, 0.7), (0.05, 0.2, 2.0), (2.0, 3.0, 0.01)] {
                let c = palpha_correction(&kp(3, alpha), t, a, b).unwrap();
                let q = palpha_correction_d3_quadrature(alpha, t, a, b).unwrap();
                assert!(
                    (c / q - 1.0).abs() < 1e-9,
                    "alpha {alpha} t {t}: {c} vs {q}"
                );
            }
        }
    }

    #[test]
    fn d2_matches_reference_values() {
        // independent high-precision evaluations of the same integral
        let cases = [
            (0.0, 1.0, 1.0, 0.7, 0.183_774_768_722_642),
            (0.0, 0.5, 0.3, 1.5, 0.059_619_617_849_203_4),
            (1.0, 1.0, 1.0, 0.7, 0.089_460_407_291_462_4),
            (1.0, 0.5, 0.3, 1.5, 0.038_569_881_981_185_3),
            (-1.0, 1.0, 1.0, 0.7, 0.731_337_504_605_854),
            (-1.0, 0.5, 0.3, 1.5, 0.118_970_658_679_535),
        ];
        for (alpha, t, a, b, want) in cases {
            let q = palpha_correction(&kp(2, alpha), t, a, b).unwrap();
            assert!(
                (q / want - 1.0).abs() < 1e-9,
                "{alpha} {t} {a} {b}: {q} vs {want}"
            );
        }
    }

    #[test]
    fn d2_rule_matches_adaptive() {
        for &alpha in &[-1.0, 0.0, 1.0, 5.0] {
            for &t in &[1.0 / 64.0, 0.3, 1.0, 2.0] {
                let rule = D2Rule::new(alpha, t).unwrap();
                for &(a, b) in &[
                    (1e-4, 1e-4),
                    (1e-4, 0.5),
                    (0.3, 0.31),
                    (1.0, 2.0),
                    (5.0, 0.01),
                    (3.0, 4.0),
                ] {
                    let q = palpha_correction(&kp(2, alpha), t, a, b).unwrap();
                    let r = rule.correction(a, b);
                    let ok = (r - q).abs() <= 1e-8 * q.abs() + 1e-300;
                    assert!(ok, "alpha {alpha} t {t} a {a} b {b}: {r} vs {q}");
                }
            }
        }
    }

    #[test]
    fn correction_symmetric_and_decreasing_in_alpha() {
        for d in [2, 3] {
            let q1 = palpha_correction(&kp(d, 0.5), 0.8, 0.4, 1.3).unwrap();
            let q2 = palpha_correction(&kp(d, 0.5), 0.8, 1.3, 0.4).unwrap();
            assert!((q1 / q2 - 1.0).abs() < 1e-10);
            let q3 = palpha_correction(&kp(d, 0.7), 0.8, 0.4, 1.3).unwrap();
            assert!(q3 < q1);
        }
    }

    #[test]
    fn d3_total_mass_matches_radial_quadrature() {
        for &alpha in &[0.0, 1e-6, 0.5, -0.5] {
            let p = kp(3, alpha);
            let m = palpha_total_mass_radial(&p, 1.0, 1.0).unwrap();
            let q = integrate_value(
                |b| 4.0 * PI * b * b * palpha_correction(&p, 1.0, 1.0, b).unwrap(),
                &[0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 40.0],
                Tolerance::rel(1e-12),
            )
            .unwrap();
            assert!(
                (m - 1.0 - q).abs() < 1e-10 * m,
                "alpha {alpha}: {m} vs {}",
                1.0 + q
            );
        }
        let m0 = palpha_total_mass_radial(&kp(3, 0.0), 1.0, 1.0).unwrap();
        assert!((m0 - 1.3993).abs() < 1e-4);
    }

    #[test]
    fn d2_total_mass_matches_radial_quadrature() {
        for &alpha in &[0.0, 1.0, -1.0] {
            let p = kp(2, alpha);
            let m = palpha_total_mass_radial(&p, 0.6, 0.8).unwrap();
            let q = integrate_value(
                |b| {
                    if b <= 0.0 {
                        0.0
                    } else {
                        2.0 * PI * b * palpha_correction(&p, 0.6, 0.8, b).unwrap()
                    }
                },
                &[0.0, 1e-4, 1e-2, 0.3, 0.8, 2.0, 4.0, 8.0, 16.0],
                Tolerance::rel(1e-10),
            )
            .unwrap();
            assert!(
                (m - 1.0 - q).abs() < 1e-8 * m,
                "alpha {alpha}: {m} vs {}",
                1.0 + q
            );
        }
    }

    #[test]
    fn sphere_average_matches_angle_quadrature() {
        for d in [2, 3] {
            let (t, a, b) = (0.3, 0.9, 1.4);
            let x = SpacePoint::on_axis(d, a);
            let want = if d == 2 {
                integrate_value(
                    |th: f64| {
                        let y = SpacePoint::new(&[b * th.cos(), b * th.sin()]).unwrap();
                        heat_kernel(2, t, &x, &y).unwrap()
                    },
                    &[0.0, PI, 2.0 * PI],
                    Tolerance::rel(1e-13),
                )
                .unwrap()
            } else {
                integrate_value(
                    |c: f64| {
                        let y = SpacePoint::at_angle(3, b, c);
                        2.0 * PI * heat_kernel(3, t, &x, &y).unwrap()
                    },
                    &[-1.0, 0.0, 1.0],
                    Tolerance::rel(1e-13),
                )
                .unwrap()
            };
            assert!((heat_sphere_average(d, t, a, b) / want - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_state_overflow_is_an_error() {
        let p = kp(3, -1.76);
        let x = SpacePoint::on_axis(3, 0.05);
        assert!(matches!(
            palpha_kernel(&p, 1.6, &x, &x),
            Err(crate::Error::Domain(_))
        ));
        assert!(palpha_kernel(&p, 0.5, &x, &x).unwrap().value.is_finite());
    }

    #[test]
    fn residual_small_for_palpha_and_large_for_pbar() {
        let x = SpacePoint::on_axis(3, 1.0);
        let y = SpacePoint::at_angle(3, 1.0, 0.5);
        let r = heat_residual(&kp(3, 0.0), 1.0, &x, &y, 1e-3, 1e-3).unwrap();
        assert!(r.abs() < 1e-6, "{r}");
        let x2 = SpacePoint::on_axis(2, 0.8);
        let y2 = SpacePoint::at_angle(2, 1.2, -0.3);
        let r2 = heat_residual(&kp(2, 0.5), 0.7, &x2, &y2, 5e-3, 1e-2).unwrap();
        assert!(r2.abs() < 1e-5, "{r2}");
        // P̄ is only a bound: its own residual is O(1)
        let pb = |t: f64, x: &SpacePoint| pbar_kernel(3, t, x, &y).unwrap();
        let h = 1e-3;
        let dt = (pb(1.0 + h, &x) - pb(1.0 - h, &x)) / (2.0 * h);
        let mut lap = 0.0;
        for k in 0..3 {
            lap += (pb(1.0, &x.shifted(k, h)) - 2.0 * pb(1.0, &x) + pb(1.0, &x.shifted(k, -h)))
                / (h * h);
        }
        assert!(((dt - lap) / pb(1.0, &x)).abs() > 0.1);
        assert!(heat_residual(
            &kp(3, 0.0),
            1.0,
            &SpacePoint::on_axis(3, 1e-3),
            &y,
            1e-3,
            1e-3
        )
        .is_err());
    }
}
