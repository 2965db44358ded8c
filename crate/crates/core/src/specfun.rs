//! Gamma, Macdonald K0, scaled I0, erfcx and the Volterra-type functions
//! N(x) = ∫₀^∞ x^u/Γ(u) du and ν(x) = ∫₀^∞ x^u/Γ(u+1) du.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{domain, Result};
use crate::quad::{integrate_value, Tolerance};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SQRT_PI: f64 = 1.772_453_850_905_516;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracySpec {
    pub rel_tol: f64,
    pub series_cutoff: f64,
}

impl Default for AccuracySpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            series_cutoff: 2.0,
        }
    }
}

impl AccuracySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !(self.series_cutoff > 0.0) {
            return Err(domain("rel_tol and series_cutoff must be positive"));
        }
        Ok(())
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(u) for u > 0.
pub fn ln_gamma(u: f64) -> f64 {
    if u < 0.5 {
        // Γ(u) = Γ(u+1)/u keeps the Lanczos sum in its accurate range.
        return ln_gamma(u + 1.0) - u.ln();
    }
    let x = u - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Γ(u) for u > 0.
pub fn gamma(u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(domain(format!("gamma requires u > 0, got {u}")));
    }
    if u < 0.5 {
        // reflection keeps full relative accuracy near the pole
        return Ok(PI / ((PI * u).sin() * gamma(1.0 - u)?));
    }
    if u == u.floor() && u <= 21.0 {
        return Ok((1..u as u64).map(|k| k as f64).product());
    }
    Ok(ln_gamma(u).exp())
}

/// Euler Beta function B(a, b).
pub fn beta_fn(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(domain("beta requires positive arguments"));
    }
    Ok((ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp())
}

/// e^{-z} I₀(z) for z ≥ 0.
pub fn i0_scaled(z: f64) -> f64 {
    let z = z.abs();
    if z <= 20.0 {
        let q = 0.25 * z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        return sum * (-z).exp();
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let c = (2 * k - 1) as f64;
        let next = term * c * c / (k as f64 * 8.0 * z);
        if next > term {
            break;
        }
        term = next;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum / (2.0 * PI * z).sqrt()
}

fn k0_series(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let lead = -((0.5 * z).ln() + EULER_GAMMA);
    let mut term = 1.0;
    let mut harmonic = 0.0;
    let mut i0 = 1.0;
    let mut tail = 0.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        harmonic += 1.0 / k;
        i0 += term;
        tail += term * harmonic;
        if term * (harmonic + lead.abs()) < 1e-17 * (lead * i0 + tail).abs() {
            break;
        }
        k += 1.0;
    }
    lead * i0 + tail
}

/// Steed's continued fraction; returns s with K₀(z) = √(π/2z) e^{-z} / s.
fn k0_steed(z: f64) -> f64 {
    let mut b = 2.0 * (1.0 + z);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 1..100_000 {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    s
}

/// Macdonald function K₀(z), z > 0.
pub fn macdonald_k0(z: f64) -> Result<f64> {
    macdonald_k0_with(z, &AccuracySpec::default())
}

pub fn macdonald_k0_with(z: f64, spec: &AccuracySpec) -> Result<f64> {
    if !(z > 0.0) {
        return Err(domain(format!("K0 requires z > 0, got {z}")));
    }
    if z <= spec.series_cutoff {
        Ok(k0_series(z))
    } else {
        Ok((PI / (2.0 * z)).sqrt() * (-z).exp() / k0_steed(z))
    }
}

/// K̃₀(z) = e^z (2z/π)^{1/2} K₀(z), z ≥ 0, with K̃₀(0) = 0.
pub fn k0_tilde(z: f64) -> Result<f64> {
    k0_tilde_with(z, &AccuracySpec::default())
}

pub fn k0_tilde_with(z: f64, spec: &AccuracySpec) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(domain(format!("K0 tilde requires z >= 0, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z <= spec.series_cutoff {
        Ok(z.exp() * (2.0 * z / PI).sqrt() * k0_series(z))
    } else {
        Ok(1.0 / k0_steed(z))
    }
}

const KT_LO: f64 = -25.0;
const KT_HI: f64 = 8.0;
const KT_STEPS: usize = 64;

fn k0_tilde_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ((KT_HI - KT_LO) as usize) * KT_STEPS + 4;
        (0..n)
            .map(|i| {
                let l = KT_LO + (i as f64 - 1.0) / KT_STEPS as f64;
                k0_tilde(l.exp()).unwrap().ln()
            })
            .collect()
    })
}

/// Tabulated K̃₀ (cubic interpolation of ln K̃₀ in ln z), relative error ~1e-10.
pub fn k0_tilde_fast(z: f64) -> f64 {
    if !(z > 0.0) {
        return 0.0;
    }
    let l = z.ln();
    if l < KT_LO {
        return z.exp() * (2.0 * z / PI).sqrt() * k0_series(z);
    }
    if l >= KT_HI {
        let w = 1.0 / z;
        return 1.0 - w / 8.0 + 9.0 / 128.0 * w * w - 225.0 / 3072.0 * w * w * w;
    }
    let tab = k0_tilde_table();
    let pos = (l - KT_LO) * KT_STEPS as f64;
    let i = pos.floor();
    let s = pos - i;
    let k = i as usize;
    // nodes k, k+1, k+2, k+3 sit at positions i-1, i, i+1, i+2
    let (y0, y1, y2, y3) = (tab[k], tab[k + 1], tab[k + 2], tab[k + 3]);
    let v = -s * (s - 1.0) * (s - 2.0) / 6.0 * y0 + (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0 * y1
        - (s + 1.0) * s * (s - 2.0) / 2.0 * y2
        + (s + 1.0) * s * (s - 1.0) / 6.0 * y3;
    v.exp()
}

/// Tail c(x) of the continued fraction √π erfcx(x) = 1/(x + c(x)).
fn erfc_cf_tail(x: f64) -> f64 {
    let mut t = 0.0;
    for k in (1..=80).rev() {
        t = 0.5 * k as f64 / (x + t);
    }
    t
}

/// Scaled complementary error function e^{x²} erfc(x).
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        if x < -26.6 {
            return f64::INFINITY;
        }
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 4.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        1.0 / (SQRT_PI * (x + erfc_cf_tail(x)))
    }
}

/// 1 − √π z erfcx(z) for z ≥ 0, without cancellation at large z.
pub fn erfcx_gap(z: f64) -> f64 {
    if z < 4.0 {
        1.0 - SQRT_PI * z * erfcx(z)
    } else {
        let c = erfc_cf_tail(z);
        c / (z + c)
    }
}

/// Taylor coefficients of 1/Γ at 0 (index k multiplies u^k).
const RGAMMA: [f64; 27] = [
    0.0,
    1.0,
    0.577_215_664_901_532_86,
    -0.655_878_071_520_253_88,
    -0.042_002_635_034_095_236,
    0.166_538_611_382_291_49,
    -0.042_197_734_555_544_337,
    -0.009_621_971_527_876_973_6,
    0.007_218_943_246_663_099_5,
    -0.001_165_167_591_859_065_1,
    -0.000_215_241_674_114_950_97,
    0.000_128_050_282_388_116_19,
    -0.000_020_134_854_780_788_239,
    -1.250_493_482_142_670_7e-6,
    1.133_027_231_981_695_9e-6,
    -2.056_338_416_977_607_1e-7,
    6.116_095_104_481_415_8e-9,
    5.002_007_644_469_222_9e-9,
    -1.181_274_570_487_020_1e-9,
    1.043_426_711_691_100_5e-10,
    7.782_263_439_905_071e-12,
    -3.696_805_618_642_205_7e-12,
    5.100_370_287_454_476e-13,
    -2.058_326_053_566_506_8e-14,
    -5.348_122_539_423_018e-15,
    1.226_778_628_238_260_8e-15,
    -1.181_259_301_697_458_8e-16,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Volterra {
    /// N(x) = ∫₀^∞ x^u / Γ(u) du
    N,
    /// ν(x) = ∫₀^∞ x^u / Γ(u+1) du
    Nu,
}

impl Volterra {
    fn log_weight(self, u: f64) -> f64 {
        match self {
            Volterra::N => -ln_gamma(u),
            Volterra::Nu => -ln_gamma(u + 1.0),
        }
    }

    fn series(self, l: f64) -> f64 {
        let a = -l;
        let mut sum = 0.0;
        let mut fact = 1.0;
        let mut pow = a;
        for (k, c) in RGAMMA.iter().enumerate().skip(1) {
            let kf = k as f64;
            match self {
                Volterra::N => {
                    fact *= kf;
                    pow *= a;
                    sum += c * fact / pow;
                }
                Volterra::Nu => {
                    if k > 1 {
                        fact *= kf - 1.0;
                        pow *= a;
                    }
                    sum += c * fact / pow;
                }
            }
        }
        sum
    }
}

fn volterra_breakpoints(l: f64) -> Vec<f64> {
    let mut pts = vec![0.0];
    if l < 1.0 {
        let w = 1.0 / (-l).max(1.0);
        for k in [0.125, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            pts.push(k * w);
        }
    } else {
        let c = l.exp();
        let sd = c.sqrt().max(1.0);
        pts.push(0.5);
        pts.push(1.0);
        for k in -12..=24 {
            let u = c + k as f64 * sd;
            if u > 1.0 + 1e-9 {
                pts.push(u);
            }
        }
        pts.push(c + 30.0 * sd + 20.0);
    }
    pts
}

/// Direct quadrature of ∫ u^m e^{uL} w(u) du for m ∈ {0, 1}.
fn volterra_moment(kind: Volterra, l: f64, m: i32) -> f64 {
    let pts = volterra_breakpoints(l);
    let f = |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        u.powi(m) * (u * l + kind.log_weight(u)).exp()
    };
    integrate_value(f, &pts, Tolerance::rel(1e-14).with_abs(1e-300)).unwrap_or(f64::NAN)
}

const TABLE_LO: f64 = -30.0;
const TABLE_HI: f64 = 4.0;
const TABLE_STEPS_PER_UNIT: usize = 256;

struct LogTable {
    g: Vec<f64>,
    dg: Vec<f64>,
}

impl LogTable {
    fn build(kind: Volterra) -> Self {
        let n = ((TABLE_HI - TABLE_LO) as usize) * TABLE_STEPS_PER_UNIT + 1;
        let h = 1.0 / TABLE_STEPS_PER_UNIT as f64;
        let mut g = Vec::with_capacity(n);
        let mut dg = Vec::with_capacity(n);
        for i in 0..n {
            let l = TABLE_LO + i as f64 * h;
            let m0 = volterra_moment(kind, l, 0);
            let m1 = volterra_moment(kind, l, 1);
            g.push(m0.ln());
            dg.push(m1 / m0);
        }
        Self { g, dg }
    }

    fn eval(&self, l: f64) -> f64 {
        let h = 1.0 / TABLE_STEPS_PER_UNIT as f64;
        let pos = (l - TABLE_LO) / h;
        let i = (pos.floor() as usize).min(self.g.len() - 2);
        let s = pos - i as f64;
        let (g0, g1) = (self.g[i], self.g[i + 1]);
        let (d0, d1) = (self.dg[i] * h, self.dg[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let v = (2.0 * s3 - 3.0 * s2 + 1.0) * g0
            + (s3 - 2.0 * s2 + s) * d0
            + (-2.0 * s3 + 3.0 * s2) * g1
            + (s3 - s2) * d1;
        v.exp()
    }
}

fn table(kind: Volterra) -> &'static LogTable {
    static N_TABLE: OnceLock<LogTable> = OnceLock::new();
    static NU_TABLE: OnceLock<LogTable> = OnceLock::new();
    match kind {
        Volterra::N => N_TABLE.get_or_init(|| LogTable::build(Volterra::N)),
        Volterra::Nu => NU_TABLE.get_or_init(|| LogTable::build(Volterra::Nu)),
    }
}

/// Evaluate N or ν at x = e^l. Accepts l = −∞ (value 0).
pub fn volterra_ln(kind: Volterra, l: f64) -> f64 {
    if l == f64::NEG_INFINITY {
        return 0.0;
    }
    if l < TABLE_LO {
        kind.series(l)
    } else if l <= TABLE_HI {
        table(kind).eval(l)
    } else {
        volterra_moment(kind, l, 0)
    }
}

/// Direct quadrature of N or ν at x = e^l, bypassing the table.
pub fn volterra_ln_direct(kind: Volterra, l: f64) -> f64 {
    volterra_moment(kind, l, 0)
}
