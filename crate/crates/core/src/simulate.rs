//! Weighted branching-particle realization of the level-n Trotter process:
//! flows of length 1/n alternate with continuous-state branching, and the
//! Laplace functional of the result is exactly exp(−⟨μ, v_n(t)⟩).

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::field::{FieldSample, FlowOperator, RadialGrid, Semigroup};
use crate::kernel::SpacePoint;
use crate::loglaplace::{validate_hypothesis, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    /// unused trailing coordinates are zero
    pub pos: [f64; 3],
    pub mass: f64,
}

impl Particle {
    pub fn radius(&self) -> f64 {
        (self.pos[0] * self.pos[0] + self.pos[1] * self.pos[1] + self.pos[2] * self.pos[2]).sqrt()
    }
}

/// Atoms of the current measure. `pending` flows of length `delta` have not
/// been applied yet; pairings go through S_delta^pending φ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub d: usize,
    pub particles: Vec<Particle>,
    pub time: f64,
    pub pending: usize,
    pub delta: f64,
}

impl ParticleCloud {
    pub fn empty(d: usize) -> Self {
        Self {
            d,
            particles: Vec::new(),
            time: 0.0,
            pending: 0,
            delta: 0.0,
        }
    }

    pub fn point_mass(x: &SpacePoint, mass: f64) -> Result<Self> {
        if x.norm() == 0.0 {
            return Err(domain("particles cannot sit at the origin"));
        }
        if !(mass >= 0.0 && mass.is_finite()) {
            return Err(domain("mass must be finite and nonnegative"));
        }
        let pos = x.array();
        let mut c = Self::empty(x.dim());
        if mass > 0.0 {
            c.particles.push(Particle { pos, mass });
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Mass carried by the atoms (before any pending flow).
    pub fn total_mass(&self) -> f64 {
        self.particles.iter().map(|p| p.mass).sum()
    }

    /// Σ mass·f(|position|), ignoring pending flows.
    pub fn pair_raw(&self, f: &FieldSample) -> f64 {
        self.particles
            .iter()
            .map(|p| p.mass * f.eval_radius(p.radius()))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// diffuse flowed mass followed by branching, realized as Poisson clusters
    #[default]
    Exact,
    /// weighted random moves carrying the mass factor m^α
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub trotter_n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub particle_cap: usize,
    /// split a particle once its mass exceeds this multiple of the initial per-particle mass
    pub split_factor: f64,
    pub splitting: bool,
    pub flow_mode: FlowMode,
    /// start with a flow of length 1/n before any branching
    pub initial_flow: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trotter_n: 32,
            replicates: 10_000,
            seed: 0,
            particle_cap: 1_000_000,
            split_factor: 4.0,
            splitting: true,
            flow_mode: FlowMode::Exact,
            initial_flow: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trotter_n == 0 || self.replicates == 0 || self.particle_cap == 0 {
            return Err(domain(
                "trotter_n, replicates and particle_cap must be positive",
            ));
        }
        if !(self.split_factor > 1.0) {
            return Err(domain("split_factor must exceed 1"));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.trotter_n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                count: 0,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, count: n }
    }

    /// Unbiased sample variance with its standard error.
    pub fn variance_of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n < 4 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                count: n,
            };
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
        let var = m2 * nf / (nf - 1.0);
        let se = ((m4 - var * var * (nf - 3.0) / (nf - 1.0)).max(0.0) / nf).sqrt();
        Self {
            mean: var,
            se,
            count: n,
        }
    }

    pub fn z_score(&self, target: f64) -> f64 {
        let diff = self.mean - target;
        if self.se > 0.0 {
            diff / self.se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY * diff.signum()
        }
    }
}

/// Uniform draw in (0, 1).
fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Size-biased (by 1/S) positive β-stable variable via Kanter's
/// representation: (A(U)/W)^{(1−β)/β} with W ~ Gamma(1/β) and U tilted by A^{-(1−β)/β}.
fn tilted_stable<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> f64 {
    let g = (1.0 - beta) / beta;
    let ln_bound = -beta.ln() - g * (1.0 - beta).ln();
    let w = Gamma::new(1.0 / beta, 1.0)
        .expect("valid shape")
        .sample(rng);
    loop {
        let u = PI * open01(rng);
        // ln A(u)^{-(1−β)/β}
        let ln_g = u.sin().ln() / beta - (beta * u).sin().ln() - g * ((1.0 - beta) * u).sin().ln();
        if open01(rng).ln() <= ln_g - ln_bound {
            return (-ln_g - g * w.ln()).exp();
        }
    }
}

/// Mass of one branching cluster over time delta.
pub fn cluster_mass<R: Rng + ?Sized>(delta: f64, eta: f64, beta: f64, rng: &mut R) -> f64 {
    let c = eta * beta * delta;
    let e: f64 = Exp1.sample(rng);
    if beta >= 1.0 {
        return c * e;
    }
    c.powf(1.0 / beta) * e.powf(1.0 / beta) * tilted_stable(beta, rng)
}

/// Expected number of clusters per unit mass over time delta.
pub fn cluster_rate(delta: f64, eta: f64, beta: f64) -> f64 {
    (eta * beta * delta).powf(-1.0 / beta)
}

/// One draw of the branching transition with Laplace transform
/// exp(−mass · csb_step(λ, δ, η, β)).
pub fn csb_sample<R: Rng + ?Sized>(
    mass: f64,
    delta: f64,
    eta: f64,
    beta: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(mass >= 0.0 && mass.is_finite()) {
        return Err(domain("mass must be finite and nonnegative"));
    }
    if !(delta >= 0.0) || !(eta >= 0.0) || !(beta > 0.0 && beta <= 1.0) {
        return Err(domain("invalid branching parameters"));
    }
    if eta == 0.0 || delta == 0.0 || mass == 0.0 {
        return Ok(mass);
    }
    let lam = mass * cluster_rate(delta, eta, beta);
    let n = Poisson::new(lam)
        .map_err(|e| domain(format!("cluster count: {e}")))?
        .sample(rng) as u64;
    if n == 0 {
        return Ok(0.0);
    }
    if beta >= 1.0 {
        let g = Gamma::new(n as f64, 1.0).map_err(|e| domain(format!("gamma: {e}")))?;
        return Ok(eta * delta * g.sample(rng));
    }
    Ok((0..n).map(|_| cluster_mass(delta, eta, beta, rng)).sum())
}

/// Sampling tables for the kernel P^α(δ; x, ·) built from the flow operator rows.
#[derive(Debug, Clone)]
pub struct FlowSampler {
    pub delta: f64,
    grid: Arc<RadialGrid>,
    /// correction mass per node (m^α − 1)
    corr_mass: Vec<f64>,
    /// per row: cumulative masses of [disc below r_min, cell 0, ..., cell n−1]
    cum: Vec<f64>,
}

impl FlowSampler {
    pub fn new(op: &FlowOperator) -> Self {
        let grid = op.grid.clone();
        let n = grid.len();
        let mut cum = Vec::with_capacity(n * (n + 1));
        let mut corr_mass = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = op.corr_inner_mass(i).max(0.0);
            cum.push(acc);
            for w in op.corr_row(i) {
                acc += w.max(0.0);
                cum.push(acc);
            }
            corr_mass.push(acc);
        }
        Self {
            delta: op.t,
            grid,
            corr_mass,
            cum,
        }
    }

    /// Position in the grid: (row, fraction toward the next row), None beyond r_max.
    fn locate(&self, a: f64) -> Option<(usize, f64)> {
        let g = &self.grid;
        if a >= g.r_max() {
            return None;
        }
        if a <= g.r_min() {
            return Some((0, 0.0));
        }
        let pos = (a / g.r_min()).ln() / g.h;
        let i = (pos.floor() as usize).min(g.len() - 2);
        Some((i, pos - i as f64))
    }

    /// m^α(δ, a) − 1.
    pub fn correction_mass(&self, a: f64) -> f64 {
        let g = &self.grid;
        let c = &self.corr_mass;
        if a < g.r_min() {
            // d=3 grows like 1/a, d=2 logarithmically
            return if g.d == 3 {
                c[0] * g.r_min() / a
            } else {
                c[0] + ((c[0] - c[1]) / g.h).max(0.0) * (g.r_min() / a).ln()
            };
        }
        match self.locate(a) {
            None => 0.0,
            Some((i, s)) if c[i] > 0.0 && c[i + 1] > 0.0 => {
                (c[i].ln() * (1.0 - s) + c[i + 1].ln() * s).exp()
            }
            Some((i, s)) => (1.0 - s) * c[i] + s * c[i + 1],
        }
    }

    pub fn total_mass(&self, a: f64) -> f64 {
        1.0 + self.correction_mass(a)
    }

    /// Radius drawn from the normalized correction kernel out of radius a,
    /// mixing the normalized rows of the neighbouring nodes.
    fn correction_radius<R: Rng + ?Sized>(&self, a: f64, rng: &mut R) -> f64 {
        let g = &self.grid;
        let n = g.len();
        let row = match self.locate(a) {
            None => n - 1,
            Some((i, s)) => {
                if rng.random::<f64>() < s {
                    i + 1
                } else {
                    i
                }
            }
        };
        let cum = &self.cum[row * (n + 1)..(row + 1) * (n + 1)];
        let target = rng.random::<f64>() * cum[n];
        let k = cum.partition_point(|&c| c <= target).min(n);
        let r0 = g.r_min();
        if k == 0 {
            let pk = if g.d == 3 { 1.0 } else { 0.0 };
            return r0 * open01(rng).powf(1.0 / (g.d as f64 - pk));
        }
        let j = k - 1;
        let b = g.nodes[j] * (g.h * (rng.random::<f64>() - 0.5)).exp();
        b.clamp(r0, g.r_max())
    }

    /// New position drawn from P^α(δ; x, ·)/m^α(δ, x), given m^α − 1 at x.
    pub fn sample_move<R: Rng + ?Sized>(&self, pos: &[f64; 3], corr: f64, rng: &mut R) -> [f64; 3] {
        let d = self.grid.d;
        if rng.random::<f64>() * (1.0 + corr) < 1.0 {
            let s = (2.0 * self.delta).sqrt();
            loop {
                let mut y = *pos;
                for c in y.iter_mut().take(d) {
                    let z: f64 = StandardNormal.sample(rng);
                    *c += s * z;
                }
                if y.iter().any(|c| *c != 0.0) {
                    return y;
                }
            }
        }
        let a = (pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2]).sqrt();
        let b = self.correction_radius(a, rng);
        let mut dir = [0.0; 3];
        loop {
            let mut nrm: f64 = 0.0;
            for c in dir.iter_mut().take(d) {
                *c = StandardNormal.sample(rng);
                nrm += *c * *c;
            }
            if nrm > 0.0 {
                let f = b / nrm.sqrt();
                dir.iter_mut().take(d).for_each(|c| *c *= f);
                return dir;
            }
        }
    }
}

/// S_δ^j φ for the pending flows of a cloud.
#[derive(Debug, Clone)]
pub struct Observable {
    pub delta: f64,
    flowed: Vec<FieldSample>,
}

impl Observable {
    pub fn new(sg: &Semigroup, phi: &FieldSample, delta: f64, max_pending: usize) -> Result<Self> {
        let mut flowed = vec![phi.clone()];
        for _ in 0..max_pending {
            let next = sg.apply(delta, flowed.last().unwrap())?;
            flowed.push(next);
        }
        Ok(Self { delta, flowed })
    }

    /// ⟨X, φ⟩ with the cloud's pending flows applied to φ.
    pub fn pair(&self, cloud: &ParticleCloud) -> Result<f64> {
        if cloud.pending > 0 && cloud.delta != self.delta {
            return Err(domain("pending flow length differs from the observable's"));
        }
        let f = self
            .flowed
            .get(cloud.pending)
            .ok_or_else(|| domain(format!("observable lacks {} pending flows", cloud.pending)))?;
        Ok(cloud.pair_raw(f))
    }
}

pub fn estimate_laplace(clouds: &[ParticleCloud], phi: &Observable) -> Result<Estimate> {
    let xs = clouds
        .iter()
        .map(|c| phi.pair(c).map(|v| (-v).exp()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&xs))
}

pub fn estimate_mean(clouds: &[ParticleCloud], phi: &Observable) -> Result<Estimate> {
    let xs = clouds
        .iter()
        .map(|c| phi.pair(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&xs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Flow,
    Branch(f64),
}

/// One replicate's summary at the final time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub n_particles: usize,
    pub total_mass: f64,
    pub pairing: f64,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub params: ModelParams,
    pub config: SimConfig,
    pub sampler: FlowSampler,
}

impl Simulator {
    pub fn new(params: &ModelParams, config: &SimConfig, sg: &Semigroup) -> Result<Self> {
        let report = validate_hypothesis(params);
        if !report.ok {
            return Err(Error::Hypothesis(report.violations.join("; ")));
        }
        config.validate()?;
        if sg.params != params.kernel() {
            return Err(domain("semigroup parameters differ from model parameters"));
        }
        let op = sg.operator(config.delta())?;
        Ok(Self {
            params: *params,
            config: *config,
            sampler: FlowSampler::new(&op),
        })
    }

    pub fn delta(&self) -> f64 {
        self.sampler.delta
    }

    /// Operations applied to the initial measure, first to last.
    fn schedule(&self, t: f64) -> Vec<Op> {
        let n = self.config.trotter_n as f64;
        let delta = self.delta();
        let k = (t * n + 1e-9).floor() as usize;
        let rest = t - k as f64 * delta;
        let rest = if rest > 1e-12 * delta { rest } else { 0.0 };
        let mut ops = Vec::with_capacity(2 * k + 3);
        if self.config.initial_flow {
            if rest > 0.0 {
                ops.push(Op::Branch(rest));
            }
            ops.push(Op::Flow);
            for _ in 0..k {
                ops.push(Op::Branch(delta));
                ops.push(Op::Flow);
            }
        } else {
            for _ in 0..k {
                ops.push(Op::Branch(delta));
                ops.push(Op::Flow);
            }
            if rest > 0.0 {
                ops.push(Op::Branch(rest));
            }
        }
        ops
    }

    /// Largest number of pending flows a path to time t can end with.
    pub fn max_pending(&self, t: f64) -> usize {
        self.schedule(t).iter().filter(|o| **o == Op::Flow).count()
    }

    fn check_cap(&self, n: usize) -> Result<()> {
        if n > self.config.particle_cap {
            return Err(Error::ParticleCap {
                cap: self.config.particle_cap,
            });
        }
        Ok(())
    }

    fn split(&self, cloud: &mut ParticleCloud, threshold: f64) {
        if !self.config.splitting || !(threshold > 0.0) {
            return;
        }
        if cloud.particles.iter().all(|p| p.mass <= threshold) {
            return;
        }
        let mut out = Vec::with_capacity(cloud.particles.len());
        for p in &cloud.particles {
            if p.mass > threshold {
                let k = (p.mass / threshold).ceil();
                let m = p.mass / k;
                for _ in 0..k as usize {
                    out.push(Particle {
                        pos: p.pos,
                        mass: m,
                    });
                }
            } else {
                out.push(*p);
            }
        }
        cloud.particles = out;
    }

    /// Weighted random move of every particle over one flow interval.
    pub fn flow_step<R: Rng + ?Sized>(&self, cloud: &ParticleCloud, rng: &mut R) -> ParticleCloud {
        let mut out = ParticleCloud {
            particles: Vec::with_capacity(cloud.len()),
            ..cloud.clone()
        };
        for p in cloud.particles.iter().filter(|p| p.mass > 0.0) {
            let corr = self.sampler.correction_mass(p.radius());
            let pos = self.sampler.sample_move(&p.pos, corr, rng);
            out.particles.push(Particle {
                pos,
                mass: p.mass * (1.0 + corr),
            });
        }
        out.time += self.delta();
        out
    }

    fn branch_in_place<R: Rng + ?Sized>(
        &self,
        cloud: &mut ParticleCloud,
        tau: f64,
        rng: &mut R,
    ) -> Result<()> {
        let ModelParams { eta, beta, .. } = self.params;
        for p in cloud.particles.iter_mut() {
            p.mass = csb_sample(p.mass, tau, eta, beta, rng)?;
        }
        cloud.particles.retain(|p| p.mass > 0.0);
        Ok(())
    }

    /// Branching applied to the once-flowed measure: Poisson clusters placed
    /// independently from the normalized kernel of a mass-weighted parent.
    fn branch_flowed<R: Rng + ?Sized>(
        &self,
        cloud: &ParticleCloud,
        tau: f64,
        rng: &mut R,
    ) -> Result<ParticleCloud> {
        let ModelParams { eta, beta, .. } = self.params;
        let corr: Vec<f64> = cloud
            .particles
            .iter()
            .map(|p| self.sampler.correction_mass(p.radius()))
            .collect();
        let mut cum = Vec::with_capacity(corr.len());
        let mut acc = 0.0;
        for (p, c) in cloud.particles.iter().zip(&corr) {
            acc += p.mass * (1.0 + c);
            cum.push(acc);
        }
        let mut out = ParticleCloud {
            particles: Vec::new(),
            pending: 0,
            ..cloud.clone()
        };
        if acc == 0.0 {
            return Ok(out);
        }
        let lam = acc * cluster_rate(tau, eta, beta);
        let count = Poisson::new(lam)
            .map_err(|e| domain(format!("cluster count: {e}")))?
            .sample(rng);
        if count > self.config.particle_cap as f64 {
            return Err(Error::ParticleCap {
                cap: self.config.particle_cap,
            });
        }
        out.particles.reserve(count as usize);
        for _ in 0..count as usize {
            let target = rng.random::<f64>() * acc;
            let i = cum.partition_point(|&c| c <= target).min(cum.len() - 1);
            let pos = self
                .sampler
                .sample_move(&cloud.particles[i].pos, corr[i], rng);
            let mass = cluster_mass(tau, eta, beta, rng);
            if mass > 0.0 {
                out.particles.push(Particle { pos, mass });
            }
        }
        Ok(out)
    }

    /// One realization of the level-n process at time t started from mu0.
    pub fn simulate_path<R: Rng + ?Sized>(
        &self,
        mu0: &ParticleCloud,
        t: f64,
        rng: &mut R,
    ) -> Result<ParticleCloud> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(domain("t must be finite and nonnegative"));
        }
        if mu0.d != self.params.d {
            return Err(domain("initial measure has the wrong dimension"));
        }
        if mu0.pending != 0 {
            return Err(domain("initial measure carries pending flows"));
        }
        if mu0
            .particles
            .iter()
            .any(|p| p.radius() == 0.0 || !(p.mass >= 0.0))
        {
            return Err(domain(
                "initial particles must have nonnegative mass and sit off the origin",
            ));
        }
        self.check_cap(mu0.len())?;
        let threshold = if mu0.is_empty() {
            0.0
        } else {
            self.config.split_factor * mu0.total_mass() / mu0.len() as f64
        };
        let ops = self.schedule(t);
        let delta = self.delta();
        let exact = self.config.flow_mode == FlowMode::Exact;
        let mut cloud = ParticleCloud {
            delta,
            time: mu0.time,
            ..mu0.clone()
        };
        cloud.particles.retain(|p| p.mass > 0.0);
        for (k, op) in ops.iter().enumerate() {
            match *op {
                Op::Flow => {
                    self.split(&mut cloud, threshold);
                    if exact || k + 1 == ops.len() {
                        cloud.pending += 1;
                        cloud.time += delta;
                    } else {
                        cloud = self.flow_step(&cloud, rng);
                    }
                }
                Op::Branch(tau) => {
                    if self.params.eta > 0.0 {
                        match cloud.pending {
                            0 => self.branch_in_place(&mut cloud, tau, rng)?,
                            1 => cloud = self.branch_flowed(&cloud, tau, rng)?,
                            _ => return Err(domain("branching after more than one pending flow")),
                        }
                    }
                    cloud.time += tau;
                }
            }
            self.check_cap(cloud.len())?;
        }
        cloud.time = mu0.time + t;
        Ok(cloud)
    }

    /// Replicate r uses the seed's ChaCha stream r, so results do not depend on scheduling.
    pub fn replicate_rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(replicate as u64);
        rng
    }

    pub fn run(
        &self,
        mu0: &ParticleCloud,
        t: f64,
        phi: &Observable,
    ) -> Result<Vec<ReplicateRecord>> {
        (0..self.config.replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = self.replicate_rng(r);
                let cloud = self.simulate_path(mu0, t, &mut rng)?;
                Ok(ReplicateRecord {
                    replicate: r,
                    n_particles: cloud.len(),
                    total_mass: cloud.total_mass(),
                    pairing: phi.pair(&cloud)?,
                })
            })
            .collect()
    }
}

pub fn laplace_estimate(records: &[ReplicateRecord]) -> Estimate {
    Estimate::from_samples(
        &records
            .iter()
            .map(|r| (-r.pairing).exp())
            .collect::<Vec<_>>(),
    )
}

pub fn mean_estimate(records: &[ReplicateRecord]) -> Estimate {
    Estimate::from_samples(&records.iter().map(|r| r.pairing).collect::<Vec<_>>())
}
