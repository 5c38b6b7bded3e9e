//! Exact finite-lattice ensembles: canonical measures on the hyperplanes
//! `M_{N,K}`, the master equation, relative entropy, Dirichlet forms, the
//! equivalence of ensembles, and product measures with slowly varying
//! parameter.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{LatticeConfiguration, LatticeError, Torus};
use crate::rates::{Counts, JumpRate, RateError};
use crate::rng::{substream, Purpose};
use crate::thermo::{Thermo, ThermoError};

/// Largest state space that will be enumerated.
pub const MAX_STATES: u64 = 10_000_000;

/// Tail mass of the Poisson weights dropped per uniformization chunk.
const POISSON_TAIL: f64 = 1e-12;
/// Largest `Λt` handled in one uniformization chunk.
const CHUNK_INTENSITY: f64 = 50.0;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("state space of {count} configurations exceeds the enumeration limit {MAX_STATES}")]
    Infeasible { count: f64 },
    #[error("distributions live on different state spaces")]
    Mismatch,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("profile value {density:?} at {at:?} is not sub-critical")]
    Supercritical { density: [f64; 2], at: Vec<f64> },
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Enumeration of `M_{N,K}`: a composition of `K1` over the sites times a
/// composition of `K2`, each ranked lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    torus: Torus,
    k: [u32; 2],
    /// `comps[r][p]`: compositions of `r` into `p` ordered parts.
    comps: Vec<Vec<u64>>,
    counts: [u64; 2],
    len: usize,
}

impl StateSpace {
    pub fn new(torus: Torus, k: [u32; 2]) -> Result<Self, EnsembleError> {
        let s = torus.sites();
        let estimate = compositions_f64(k[0], s) * compositions_f64(k[1], s);
        if estimate > MAX_STATES as f64 {
            return Err(EnsembleError::Infeasible { count: estimate });
        }
        let r_max = k[0].max(k[1]) as usize;
        let mut comps = vec![vec![0u64; s + 1]; r_max + 1];
        comps[0][0] = 1;
        for p in 1..=s {
            comps[0][p] = 1;
            for r in 1..=r_max {
                comps[r][p] = comps[r][p - 1].saturating_add(comps[r - 1][p]);
            }
        }
        let counts = [comps[k[0] as usize][s], comps[k[1] as usize][s]];
        Ok(Self {
            torus,
            k,
            comps,
            counts,
            len: (counts[0] * counts[1]) as usize,
        })
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn particle_counts(&self) -> [u32; 2] {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn rank_composition(&self, total: u32, parts: impl Iterator<Item = u32>) -> u64 {
        let s = self.torus.sites();
        let mut rank = 0u64;
        let mut rem = total as usize;
        for (j, a) in parts.enumerate().take(s - 1) {
            for v in 0..a as usize {
                rank += self.comps[rem - v][s - j - 1];
            }
            rem -= a as usize;
        }
        rank
    }

    fn unrank_composition(&self, total: u32, mut rank: u64, species: usize, out: &mut [Counts]) {
        let s = self.torus.sites();
        let mut rem = total as usize;
        for (j, slot) in out.iter_mut().enumerate().take(s - 1) {
            let mut v = 0usize;
            while rank >= self.comps[rem - v][s - j - 1] {
                rank -= self.comps[rem - v][s - j - 1];
                v += 1;
            }
            slot[species] = v as u32;
            rem -= v;
        }
        out[s - 1][species] = rem as u32;
    }

    /// Index of a configuration in `M_{N,K}`.
    pub fn rank(&self, eta: &[Counts]) -> usize {
        let r1 = self.rank_composition(self.k[0], eta.iter().map(|c| c[0]));
        let r2 = self.rank_composition(self.k[1], eta.iter().map(|c| c[1]));
        (r1 * self.counts[1] + r2) as usize
    }

    pub fn unrank_into(&self, index: usize, out: &mut [Counts]) {
        let idx = index as u64;
        self.unrank_composition(self.k[0], idx / self.counts[1], 0, out);
        self.unrank_composition(self.k[1], idx % self.counts[1], 1, out);
    }

    pub fn configuration(&self, index: usize) -> LatticeConfiguration {
        let mut eta = vec![[0, 0]; self.torus.sites()];
        self.unrank_into(index, &mut eta);
        LatticeConfiguration::from_occupations(self.torus, eta).expect("site count matches")
    }
}

fn compositions_f64(r: u32, parts: usize) -> f64 {
    // C(r + parts − 1, r)
    let (r, p) = (f64::from(r), parts as f64);
    if parts == 0 {
        return if r == 0.0 { 1.0 } else { 0.0 };
    }
    (statrs::function::gamma::ln_gamma(r + p) - statrs::function::gamma::ln_gamma(r + 1.0) - statrs::function::gamma::ln_gamma(p))
        .exp()
        .round()
}

/// A probability vector indexed by a [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    space: Arc<StateSpace>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DistributionJson {
    #[serde(rename = "N")]
    n: u32,
    d: u32,
    #[serde(rename = "K")]
    k: [u32; 2],
    probabilities: Vec<f64>,
}

impl DistributionTable {
    pub fn new(space: Arc<StateSpace>, probs: Vec<f64>) -> Result<Self, EnsembleError> {
        if probs.len() != space.len() {
            return Err(EnsembleError::InvalidInput(format!(
                "{} probabilities for {} states",
                probs.len(),
                space.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(EnsembleError::InvalidInput("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::InvalidInput(format!("probabilities sum to {total}")));
        }
        Ok(Self { space, probs })
    }

    pub fn point_mass(space: Arc<StateSpace>, index: usize) -> Self {
        let mut probs = vec![0.0; space.len()];
        probs[index] = 1.0;
        Self { space, probs }
    }

    /// Uniform draw from the probability simplex (normalized exponentials),
    /// keyed by `(seed, index)`.
    pub fn random(space: Arc<StateSpace>, seed: u64, index: u64) -> Self {
        let mut rng = substream(seed, index, Purpose::InitialLaw, 0);
        let mut probs: Vec<f64> = (0..space.len()).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self { space, probs }
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn total_variation(&self, other: &Self) -> Result<f64, EnsembleError> {
        if self.space != other.space {
            return Err(EnsembleError::Mismatch);
        }
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    pub fn to_json(&self) -> Result<String, EnsembleError> {
        Ok(serde_json::to_string(&DistributionJson {
            n: self.space.torus.side(),
            d: self.space.torus.dim(),
            k: self.space.k,
            probabilities: self.probs.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, EnsembleError> {
        let j: DistributionJson = serde_json::from_str(text)?;
        let space = Arc::new(StateSpace::new(Torus::new(j.n, j.d)?, j.k)?);
        Self::new(space, j.probabilities)
    }
}

/// `log g!(k)` for `k ≤ K`, indexed `[k1][k2]`.
fn log_factorial_table(rate: &JumpRate, k: [u32; 2]) -> Result<Vec<Vec<f64>>, RateError> {
    (0..=k[0])
        .map(|a| (0..=k[1]).map(|b| rate.log_factorial([a, b])).collect())
        .collect()
}

/// `ν_{N,K}(η) ∝ ∏_x 1/g!(η(x))`.
pub fn canonical_measure(rate: &JumpRate, n: u32, d: u32, k: [u32; 2]) -> Result<DistributionTable, EnsembleError> {
    let space = Arc::new(StateSpace::new(Torus::new(n, d)?, k)?);
    canonical_on(rate, space)
}

pub fn canonical_on(rate: &JumpRate, space: Arc<StateSpace>) -> Result<DistributionTable, EnsembleError> {
    let lf = log_factorial_table(rate, space.k)?;
    let sites = space.torus.sites();
    let logw: Vec<f64> = (0..space.len())
        .into_par_iter()
        .map_init(
            || vec![[0u32; 2]; sites],
            |eta, i| {
                space.unrank_into(i, eta);
                -eta.iter().map(|c| lf[c[0] as usize][c[1] as usize]).sum::<f64>()
            },
        )
        .collect();
    let probs = normalize_log(&logw);
    Ok(DistributionTable { space, probs })
}

fn normalize_log(logw: &[f64]) -> Vec<f64> {
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `H(μ|ν) = Σ μ log(μ/ν)`, `+∞` unless `μ ≪ ν`.
pub fn relative_entropy(mu: &DistributionTable, nu: &DistributionTable) -> Result<f64, EnsembleError> {
    if mu.space != nu.space {
        return Err(EnsembleError::Mismatch);
    }
    let mut h = 0.0;
    for (&p, &q) in mu.probs.iter().zip(&nu.probs) {
        if p > 0.0 {
            if q == 0.0 {
                return Ok(f64::INFINITY);
            }
            h += p * (p / q).ln();
        }
    }
    Ok(h.max(0.0))
}

/// Time units of an evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScale {
    Raw,
    /// Macroscopic time `t` runs the chain for `t N²`.
    Diffusive,
}

/// Sparse generator of the two-species ZRP restricted to `M_{N,K}`.
#[derive(Debug, Clone)]
pub struct Generator {
    space: Arc<StateSpace>,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    rates: Vec<f64>,
    exit: Vec<f64>,
}

impl Generator {
    /// Rows hold `q(η, η^{i;x,y}) = Σ g_i(η(x)) p_N(y−x)` over moves that
    /// change the configuration.
    pub fn new(rate: &JumpRate, space: Arc<StateSpace>) -> Result<Self, EnsembleError> {
        let torus = *space.torus();
        let sites = torus.sites();
        let weight = 1.0 / (2.0 * f64::from(torus.dim()));
        let rows: Vec<Result<Vec<(u32, f64)>, EnsembleError>> = (0..space.len())
            .into_par_iter()
            .map_init(
                || vec![[0u32; 2]; sites],
                |eta, i| {
                    space.unrank_into(i, eta);
                    let mut row: Vec<(u32, f64)> = Vec::new();
                    for x in 0..sites {
                        let g = rate.eval(eta[x])?;
                        for species in 0..2 {
                            if eta[x][species] == 0 {
                                continue;
                            }
                            for y in torus.neighbours(x) {
                                if y == x {
                                    continue;
                                }
                                eta[x][species] -= 1;
                                eta[y][species] += 1;
                                let j = space.rank(eta) as u32;
                                eta[y][species] -= 1;
                                eta[x][species] += 1;
                                row.push((j, g[species] * weight));
                            }
                        }
                    }
                    row.sort_unstable_by_key(|e| e.0);
                    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(row.len());
                    for (j, q) in row {
                        match merged.last_mut() {
                            Some(last) if last.0 == j => last.1 += q,
                            _ => merged.push((j, q)),
                        }
                    }
                    Ok(merged)
                },
            )
            .collect();
        let mut offsets = Vec::with_capacity(space.len() + 1);
        let mut targets = Vec::new();
        let mut rates = Vec::new();
        let mut exit = Vec::with_capacity(space.len());
        offsets.push(0);
        for row in rows {
            let row = row?;
            exit.push(row.iter().map(|e| e.1).sum());
            for (j, q) in row {
                targets.push(j);
                rates.push(q);
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            space,
            offsets,
            targets,
            rates,
            exit,
        })
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().cloned().fold(0.0, f64::max)
    }

    /// Outgoing transitions `(target, rate)` of state `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.targets[r.clone()].iter().map(|&j| j as usize).zip(self.rates[r].iter().copied())
    }

    /// `(L f)(η) = Σ q(η,η')(f(η') − f(η))`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.space.len())
            .into_par_iter()
            .map(|i| self.row(i).map(|(j, q)| q * (f[j] - f[i])).sum())
            .collect()
    }

    /// `μ Q` for a row vector `μ`.
    pub fn forward(&self, mu: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = mu.iter().zip(&self.exit).map(|(m, e)| -m * e).collect();
        for (i, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (j, q) in self.row(i) {
                out[j] += m * q;
            }
        }
        out
    }

    /// `μ ↦ μ (I + Q/Λ)`.
    fn uniformized(&self, mu: &[f64], lambda: f64) -> Vec<f64> {
        let mut out: Vec<f64> = mu.iter().zip(&self.exit).map(|(m, e)| m * (1.0 - e / lambda)).collect();
        for (i, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (j, q) in self.row(i) {
                out[j] += m * q / lambda;
            }
        }
        out
    }

    /// `μ e^{tQ}` by uniformization, in chunks with `Λ t ≤ 50`; each chunk
    /// drops at most `1e-12` of Poisson tail mass.
    pub fn evolve(&self, mu0: &DistributionTable, t: f64, scale: TimeScale) -> Result<DistributionTable, EnsembleError> {
        if *mu0.space != *self.space {
            return Err(EnsembleError::Mismatch);
        }
        if !(t >= 0.0 && t.is_finite()) {
            return Err(EnsembleError::InvalidInput(format!("time must be finite and non-negative, got {t}")));
        }
        let n = f64::from(self.space.torus().side());
        let t = match scale {
            TimeScale::Raw => t,
            TimeScale::Diffusive => t * n * n,
        };
        let lambda = self.max_exit_rate();
        let mut mu = mu0.probs.clone();
        if lambda == 0.0 || t == 0.0 {
            return Ok(DistributionTable {
                space: self.space.clone(),
                probs: mu,
            });
        }
        let chunks = (lambda * t / CHUNK_INTENSITY).ceil().max(1.0) as usize;
        let a = lambda * t / chunks as f64;
        for _ in 0..chunks {
            let mut weight = (-a).exp();
            let mut cum = weight;
            let mut acc: Vec<f64> = mu.iter().map(|m| weight * m).collect();
            let mut v = mu;
            let mut k = 0u32;
            while 1.0 - cum > POISSON_TAIL {
                k += 1;
                v = self.uniformized(&v, lambda);
                weight *= a / f64::from(k);
                cum += weight;
                for (o, x) in acc.iter_mut().zip(&v) {
                    *o += weight * x;
                }
            }
            let total: f64 = acc.iter().sum();
            mu = acc.into_iter().map(|x| (x / total).max(0.0)).collect();
        }
        Ok(DistributionTable {
            space: self.space.clone(),
            probs: mu,
        })
    }

    /// `D(f) = −⟨f, L f⟩_ν`.
    pub fn dirichlet_form(&self, f: &[f64], nu: &DistributionTable) -> Result<f64, EnsembleError> {
        if *nu.space != *self.space || f.len() != self.space.len() {
            return Err(EnsembleError::Mismatch);
        }
        let lf = self.apply(f);
        Ok(-nu.probs.iter().zip(f).zip(&lf).map(|((p, a), b)| p * a * b).sum::<f64>())
    }
}

/// `μ0 e^{tQ}` for the chain with rate `g`.
pub fn master_equation_evolve(
    rate: &JumpRate,
    mu0: &DistributionTable,
    t: f64,
    scale: TimeScale,
) -> Result<DistributionTable, EnsembleError> {
    Generator::new(rate, mu0.space.clone())?.evolve(mu0, t, scale)
}

/// `H(μ_t | ν_ref)` along an increasing time grid.
pub fn entropy_production_trace(
    generator: &Generator,
    mu0: &DistributionTable,
    nu_ref: &DistributionTable,
    t_grid: &[f64],
    scale: TimeScale,
) -> Result<Vec<(f64, f64)>, EnsembleError> {
    if t_grid.windows(2).any(|w| !(w[1] >= w[0])) || t_grid.first().is_some_and(|t| *t < 0.0) {
        return Err(EnsembleError::InvalidInput("time grid must be non-negative and non-decreasing".into()));
    }
    let mut out = Vec::with_capacity(t_grid.len());
    let mut mu = mu0.clone();
    let mut now = 0.0;
    for &t in t_grid {
        mu = generator.evolve(&mu, t - now, scale)?;
        now = t;
        out.push((t, relative_entropy(&mu, nu_ref)?));
    }
    Ok(out)
}

/// Particle numbers used for a target density: `K_i = max(1, round(ρ_i N^d))`
/// for `ρ_i > 0`, so that small lattices still carry the species.
pub fn particle_counts(rho: [f64; 2], n: u32, d: u32) -> [u32; 2] {
    let volume = f64::from(n).powi(d as i32);
    let mut k = [0u32; 2];
    for i in 0..2 {
        if rho[i] > 0.0 {
            k[i] = ((rho[i] * volume).round() as u32).max(1);
        }
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalencePoint {
    pub n: u32,
    pub k: [u32; 2],
    pub states: usize,
    /// `H(ν_{N,K} | ν^N_{Φ̄(ρ)})`.
    pub entropy: f64,
    /// The same divided by `N^d`.
    pub normalized: f64,
}

/// `H(ν_{N,K} | ν^N_{R_c(ρ)}) / N^d` for each `N`, the grand-canonical
/// product taken at fugacity `Φ̄(ρ)` and both sides summed state by state.
pub fn equivalence_of_ensembles_trace(
    thermo: &Thermo,
    rho: [f64; 2],
    n_list: &[u32],
    d: u32,
) -> Result<Vec<EquivalencePoint>, EnsembleError> {
    let phi = thermo.extended_mean_jump_rate(rho)?;
    let log_z = thermo.log_z(phi)?;
    let rate = thermo.rate();
    n_list
        .iter()
        .map(|&n| {
            let k = particle_counts(rho, n, d);
            let space = Arc::new(StateSpace::new(Torus::new(n, d)?, k)?);
            let canonical = canonical_on(rate, space.clone())?;
            let lf = log_factorial_table(rate, k)?;
            let sites = space.torus().sites();
            let ln_phi = [phi[0].ln(), phi[1].ln()];
            let entropy: f64 = canonical
                .probs
                .par_iter()
                .enumerate()
                .map_init(
                    || vec![[0u32; 2]; sites],
                    |eta, (i, &p)| {
                        if p == 0.0 {
                            return 0.0;
                        }
                        space.unrank_into(i, eta);
                        let log_gce: f64 = eta
                            .iter()
                            .map(|c| {
                                let a = if c[0] == 0 { 0.0 } else { f64::from(c[0]) * ln_phi[0] };
                                let b = if c[1] == 0 { 0.0 } else { f64::from(c[1]) * ln_phi[1] };
                                a + b - lf[c[0] as usize][c[1] as usize] - log_z
                            })
                            .sum();
                        p * (p.ln() - log_gce)
                    },
                )
                .sum::<f64>()
                .max(0.0);
            let volume = f64::from(n).powi(d as i32);
            Ok(EquivalencePoint {
                n,
                k,
                states: space.len(),
                entropy,
                normalized: entropy / volume,
            })
        })
        .collect()
}

/// Truncated one-site marginal with an inverse-CDF sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTable {
    pub density: [f64; 2],
    pub fugacity: [f64; 2],
    pub states: Vec<Counts>,
    cdf: Vec<f64>,
    /// Mass dropped before renormalization.
    pub tail: f64,
}

impl SiteTable {
    pub fn probability(&self, i: usize) -> f64 {
        if i == 0 {
            self.cdf[0]
        } else {
            self.cdf[i] - self.cdf[i - 1]
        }
    }

    /// Inverse CDF at `u ∈ [0, 1)`.
    pub fn quantile(&self, u: f64) -> Counts {
        let i = self.cdf.partition_point(|&c| c <= u).min(self.states.len() - 1);
        self.states[i]
    }
}

/// Product measure `⊗_x ν̄_{ρ(x/N)}` on `T_N^d`.
#[derive(Debug, Clone)]
pub struct SlowlyVaryingProduct {
    torus: Torus,
    tables: Vec<Arc<SiteTable>>,
    tail_tol: f64,
}

impl SlowlyVaryingProduct {
    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn marginal(&self, x: usize) -> &SiteTable {
        &self.tables[x]
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// Draws a configuration; site `x` uses substream `(seed, replica, x)`.
    pub fn sample(&self, seed: u64, replica: u64) -> LatticeConfiguration {
        let eta: Vec<Counts> = self
            .tables
            .iter()
            .enumerate()
            .map(|(x, table)| {
                let mut rng = substream(seed, replica, Purpose::InitialSite, x as u64);
                table.quantile(rng.gen::<f64>())
            })
            .collect();
        LatticeConfiguration::from_occupations(self.torus, eta).expect("one table per site")
    }
}

/// Builds per-site marginal tables; sites sharing a profile value share a table.
pub fn slowly_varying_product<P>(
    thermo: &Thermo,
    profile: P,
    torus: Torus,
    tail_tol: f64,
) -> Result<SlowlyVaryingProduct, EnsembleError>
where
    P: Fn(&[f64]) -> [f64; 2],
{
    if !(tail_tol > 0.0 && tail_tol < 1.0) {
        return Err(EnsembleError::InvalidInput(format!("tail tolerance must lie in (0,1), got {tail_tol}")));
    }
    let mut cache: HashMap<[u64; 2], Arc<SiteTable>> = HashMap::new();
    let mut tables = Vec::with_capacity(torus.sites());
    for x in 0..torus.sites() {
        let u = torus.macro_point(x);
        let rho = profile(&u);
        let key = [rho[0].to_bits(), rho[1].to_bits()];
        if let Some(t) = cache.get(&key) {
            tables.push(t.clone());
            continue;
        }
        let phi = match thermo.mean_jump_rate(rho) {
            Ok(phi) => phi,
            Err(ThermoError::Supercritical { .. }) | Err(ThermoError::NonConvergence { .. }) => {
                return Err(EnsembleError::Supercritical { density: rho, at: u });
            }
            Err(e) => return Err(e.into()),
        };
        let m = thermo.site_marginal(phi, tail_tol)?;
        let total: f64 = m.probs.iter().sum();
        let mut acc = 0.0;
        let cdf: Vec<f64> = m
            .probs
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        let table = Arc::new(SiteTable {
            density: rho,
            fugacity: phi,
            states: m.states,
            cdf,
            tail: m.tail,
        });
        cache.insert(key, table.clone());
        tables.push(table);
    }
    Ok(SlowlyVaryingProduct {
        torus,
        tables,
        tail_tol,
    })
}

#[cfg(test)]
mod tests;
