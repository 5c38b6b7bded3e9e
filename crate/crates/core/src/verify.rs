//! Numerical checks of the limit statements: the one-block statistic, the
//! local-equilibrium discrepancy and the hydrodynamic convergence sweep.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ensembles::{slowly_varying_product, EnsembleError};
use crate::lattice::{LatticeConfiguration, LatticeError, Torus};
use crate::pde::{solve_system, PdeError, PdeRun};
use crate::profile::Profile;
use crate::rates::{Counts, JumpRate, RateError};
use crate::rng::derive_seed;
use crate::simulate::{run, SimError, TrajectoryRecord};
use crate::thermo::{Thermo, ThermoError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("no snapshot at t_macro = {t} in replica {replica}")]
    MissingSnapshot { t: f64, replica: u64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Neumaier-compensated sum, so reductions do not depend on grouping.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in values {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneBlockResult {
    pub ell: u32,
    /// `|∫ N^{-d} Σ_x ⟨F, g(η_t(x)) − Φ̄(η_t^ℓ(x))⟩ dt|` per replica.
    pub per_replica: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

/// The one-block statistic by trapezoidal quadrature over `times`, which
/// must all be snapshot times of every trajectory.
pub fn one_block_statistic<F>(
    thermo: &Thermo,
    trajectories: &[TrajectoryRecord],
    test_field: F,
    ell: u32,
    times: &[f64],
) -> Result<OneBlockResult, VerifyError>
where
    F: Fn(f64, &[f64]) -> [f64; 2] + Sync,
{
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(VerifyError::InvalidInput("quadrature times must be non-empty and increasing".into()));
    }
    let rate = thermo.rate();
    // locate snapshots and block fields
    let fields: Vec<Vec<(&LatticeConfiguration, [Vec<f64>; 2])>> = trajectories
        .par_iter()
        .map(|rec| {
            times
                .iter()
                .map(|&t| {
                    let snap = rec
                        .snapshots
                        .iter()
                        .find(|s| (s.t_macro - t).abs() <= 1e-12 * (1.0 + t))
                        .ok_or(VerifyError::MissingSnapshot { t, replica: rec.replica })?;
                    Ok((&snap.config, snap.config.empirical_density_field(ell)?))
                })
                .collect::<Result<Vec<_>, VerifyError>>()
        })
        .collect::<Result<_, _>>()?;
    let Some(torus) = fields.first().and_then(|f| f.first()).map(|(c, _)| *c.torus()) else {
        return Err(VerifyError::InvalidInput("no trajectories".into()));
    };
    let volume = torus.sites() as f64;
    let window = f64::from(2 * ell + 1).powi(torus.dim() as i32);
    // block sums are integers, so Φ̄ is needed only at finitely many points
    let key = |v: f64| (v * window).round() as u64;
    let keys: HashSet<[u64; 2]> = fields
        .par_iter()
        .flat_map_iter(|rep| {
            rep.iter()
                .flat_map(|(_, f)| (0..f[0].len()).map(move |x| [key(f[0][x]), key(f[1][x])]))
                .collect::<Vec<_>>()
        })
        .collect();
    let keys: Vec<[u64; 2]> = keys.into_iter().collect();
    let table: HashMap<[u64; 2], [f64; 2]> = keys
        .par_iter()
        .map(|k| {
            let rho = [k[0] as f64 / window, k[1] as f64 / window];
            thermo.extended_mean_jump_rate(rho).map(|p| (*k, p))
        })
        .collect::<Result<_, _>>()?;
    let macro_points: Vec<Vec<f64>> = (0..torus.sites()).map(|x| torus.macro_point(x)).collect();
    let per_replica: Vec<f64> = fields
        .par_iter()
        .map(|rep| {
            let integrand: Vec<f64> = rep
                .iter()
                .zip(times)
                .map(|((config, f), &t)| {
                    let terms = (0..torus.sites())
                        .map(|x| {
                            let g = rate.eval(config.get(x))?;
                            let phi = table[&[key(f[0][x]), key(f[1][x])]];
                            let w = test_field(t, &macro_points[x]);
                            Ok(w[0] * (g[0] - phi[0]) + w[1] * (g[1] - phi[1]))
                        })
                        .collect::<Result<Vec<f64>, RateError>>()?;
                    Ok(compensated_sum(terms) / volume)
                })
                .collect::<Result<_, RateError>>()?;
            Ok(trapezoid(times, &integrand).abs())
        })
        .collect::<Result<_, RateError>>()?;
    let (mean, stderr) = mean_stderr(&per_replica);
    Ok(OneBlockResult {
        ell,
        per_replica,
        mean,
        stderr,
    })
}

/// Trapezoidal rule; a single node is read as a point evaluation.
fn trapezoid(t: &[f64], v: &[f64]) -> f64 {
    if t.len() == 1 {
        return v[0];
    }
    compensated_sum(t.windows(2).zip(v.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])))
}

/// One-sided paired test of `E[a − b] > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub stderr: f64,
    pub t_statistic: f64,
    /// Student-t quantile at the requested confidence.
    pub critical_value: f64,
    pub passed: bool,
}

pub fn paired_decrease_test(a: &[f64], b: &[f64], confidence: f64) -> Result<PairedTest, VerifyError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(VerifyError::InvalidInput("paired test needs two equal samples of size ≥ 2".into()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, se) = mean_stderr(&diff);
    let dist = StudentsT::new(0.0, 1.0, (diff.len() - 1) as f64)
        .map_err(|e| VerifyError::InvalidInput(e.to_string()))?;
    let critical = dist.inverse_cdf(confidence);
    let t = if se > 0.0 { mean / se } else if mean > 0.0 { f64::INFINITY } else { 0.0 };
    Ok(PairedTest {
        mean_difference: mean,
        stderr: se,
        t_statistic: t,
        critical_value: critical,
        passed: t > critical,
    })
}

/// A bounded local function `f(η(x + o₁), …, η(x + o_k))`.
#[derive(Clone)]
pub struct CylinderFunction {
    offsets: Vec<Vec<i32>>,
    f: Arc<dyn Fn(&[Counts]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for CylinderFunction {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fmt.debug_struct("CylinderFunction").field("offsets", &self.offsets).finish()
    }
}

impl CylinderFunction {
    pub fn new<F>(offsets: Vec<Vec<i32>>, f: F) -> Self
    where
        F: Fn(&[Counts]) -> f64 + Send + Sync + 'static,
    {
        Self {
            offsets,
            f: Arc::new(f),
        }
    }

    /// `η_i(0)`.
    pub fn occupation(species: usize, d: u32) -> Self {
        Self::new(vec![vec![0; d as usize]], move |w| f64::from(w[0][species]))
    }

    /// `g_i(η(0))`.
    pub fn site_rate(rate: JumpRate, species: usize, d: u32) -> Self {
        Self::new(vec![vec![0; d as usize]], move |w| rate.eval(w[0]).map_or(f64::NAN, |g| g[species]))
    }

    pub fn offsets(&self) -> &[Vec<i32>] {
        &self.offsets
    }

    fn check_window(&self, torus: &Torus) -> Result<(), VerifyError> {
        let reach = self.offsets.iter().flatten().map(|o| o.unsigned_abs()).max().unwrap_or(0);
        if self.offsets.iter().any(|o| o.len() != torus.dim() as usize) || 2 * reach + 1 > torus.side() {
            return Err(VerifyError::Lattice(LatticeError::WindowTooLarge {
                ell: reach,
                n: torus.side(),
            }));
        }
        Ok(())
    }

    fn at(&self, config: &LatticeConfiguration, x: usize, buf: &mut Vec<Counts>) -> f64 {
        let torus = config.torus();
        let n = torus.side() as i64;
        let c = torus.coords(x);
        buf.clear();
        for o in &self.offsets {
            let pos: Vec<u32> = c.iter().zip(o).map(|(&a, &b)| (i64::from(a) + i64::from(b)).rem_euclid(n) as u32).collect();
            buf.push(config.get(torus.index(&pos)));
        }
        (self.f)(buf)
    }

    /// `f̃(ρ) = ∫ f dν_{R_c(ρ)}` over the product of truncated one-site
    /// marginals at fugacity `Φ̄(ρ)`.
    pub fn expectation(&self, thermo: &Thermo, rho: [f64; 2], tail_tol: f64) -> Result<f64, VerifyError> {
        let phi = thermo.extended_mean_jump_rate(rho)?;
        let m = thermo.site_marginal(phi, tail_tol)?;
        let k = self.offsets.len();
        let mut idx = vec![0usize; k];
        let mut buf = vec![[0u32; 2]; k];
        let mut terms = Vec::new();
        loop {
            let p: f64 = idx.iter().map(|&i| m.probs[i]).product();
            if p > 0.0 {
                for (b, &i) in buf.iter_mut().zip(&idx) {
                    *b = m.states[i];
                }
                terms.push(p * (self.f)(&buf));
            }
            let mut j = 0;
            loop {
                if j == k {
                    let total: f64 = m.probs.iter().sum();
                    return Ok(compensated_sum(terms) / total.powi(k as i32));
                }
                idx[j] += 1;
                if idx[j] < m.states.len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalEquilibriumResult {
    /// `N^{-d} Σ_x H(x/N) (τ_x f(η) − f̃(ρ(x/N)))` per replica.
    pub per_replica: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// Average absolute discrepancy.
    pub mean_abs: f64,
}

/// Compares spatial averages of `f` against `∫ H f̃(ρ_t)` (lattice-cell
/// quadrature) on each configuration.
pub fn local_equilibrium_test<P, H>(
    thermo: &Thermo,
    configs: &[LatticeConfiguration],
    profile: P,
    f: &CylinderFunction,
    test: H,
    tail_tol: f64,
) -> Result<LocalEquilibriumResult, VerifyError>
where
    P: Fn(&[f64]) -> [f64; 2] + Sync,
    H: Fn(&[f64]) -> f64 + Sync,
{
    let Some(first) = configs.first() else {
        return Err(VerifyError::InvalidInput("no configurations".into()));
    };
    let torus = *first.torus();
    if configs.iter().any(|c| *c.torus() != torus) {
        return Err(VerifyError::InvalidInput("configurations live on different lattices".into()));
    }
    f.check_window(&torus)?;
    let points: Vec<Vec<f64>> = (0..torus.sites()).map(|x| torus.macro_point(x)).collect();
    let weights: Vec<f64> = points.iter().map(|u| test(u)).collect();
    let rhos: Vec<[f64; 2]> = points.iter().map(|u| profile(u)).collect();
    let mut cache: HashMap<[u64; 2], f64> = HashMap::new();
    let mut expected = Vec::with_capacity(torus.sites());
    for (rho, w) in rhos.iter().zip(&weights) {
        if *w == 0.0 {
            expected.push(0.0);
            continue;
        }
        let key = [rho[0].to_bits(), rho[1].to_bits()];
        let v = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = f.expectation(thermo, *rho, tail_tol)?;
                cache.insert(key, v);
                v
            }
        };
        expected.push(v);
    }
    let volume = torus.sites() as f64;
    let reference = compensated_sum(weights.iter().zip(&expected).map(|(w, e)| w * e)) / volume;
    let per_replica: Vec<f64> = configs
        .par_iter()
        .map_init(Vec::new, |buf, c| {
            let s = compensated_sum(
                (0..torus.sites()).filter(|&x| weights[x] != 0.0).map(|x| weights[x] * f.at(c, x, buf)),
            );
            s / volume - reference
        })
        .collect();
    let (mean, stderr) = mean_stderr(&per_replica);
    let mean_abs = compensated_sum(per_replica.iter().map(|v| v.abs())) / per_replica.len() as f64;
    Ok(LocalEquilibriumResult {
        per_replica,
        mean,
        stderr,
        mean_abs,
    })
}

/// Block radius as a function of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllRule {
    /// `⌊√N⌋`.
    Sqrt,
    /// `⌊N^p⌋`.
    Power(f64),
    Fixed(u32),
}

impl Default for EllRule {
    fn default() -> Self {
        EllRule::Sqrt
    }
}

impl EllRule {
    pub fn ell(&self, n: u32) -> u32 {
        match *self {
            EllRule::Sqrt => (f64::from(n).sqrt() + 1e-9).floor() as u32,
            EllRule::Power(p) => (f64::from(n).powf(p) + 1e-9).floor() as u32,
            EllRule::Fixed(l) => l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub n_list: Vec<u32>,
    pub d: u32,
    /// Comparison times; the fit uses the last one.
    pub t_macro: Vec<f64>,
    #[serde(default)]
    pub ell: EllRule,
    pub replicas: u64,
    pub seed: u64,
    /// PDE grid points per axis.
    #[serde(default = "default_pde_m")]
    pub pde_m: usize,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
}

fn default_pde_m() -> usize {
    256
}

fn default_safety() -> f64 {
    0.4
}

fn default_tail_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: u32,
    pub t_macro: f64,
    pub ell: u32,
    pub l1_error: f64,
    pub stderr: f64,
    pub replicas: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSweep {
    pub settings: SweepSettings,
    pub rows: Vec<SweepRow>,
    /// `−slope` of `log error` against `log N` at the last time.
    pub fitted_rate: f64,
    /// RMS residual of that fit.
    pub fit_residual: f64,
    pub pde_breach: bool,
    pub frozen_replicas: u64,
}

impl ConvergenceSweep {
    /// Errors at the last comparison time, in `N` order.
    pub fn final_errors(&self) -> Vec<f64> {
        let t = *self.settings.t_macro.last().expect("non-empty time list");
        self.rows.iter().filter(|r| r.t_macro == t).map(|r| r.l1_error).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), VerifyError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["N", "t_macro", "ell", "L1_error", "stderr"])?;
        for r in &self.rows {
            w.write_record(&[
                r.n.to_string(),
                r.t_macro.to_string(),
                r.ell.to_string(),
                format!("{:.12e}", r.l1_error),
                format!("{:.12e}", r.stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), VerifyError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Least-squares slope of `y` on `x` and the RMS residual.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (compensated_sum(x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2))) / n).sqrt();
    (slope, intercept, rms)
}

/// `N^{-d} Σ_x |η^ℓ(x) − ρ(t, x/N)|₁` for one configuration.
pub fn l1_distance(config: &LatticeConfiguration, ell: u32, reference: &[[f64; 2]]) -> Result<f64, VerifyError> {
    let f = config.empirical_density_field(ell)?;
    let sites = f[0].len();
    Ok(compensated_sum((0..sites).map(|x| (f[0][x] - reference[x][0]).abs() + (f[1][x] - reference[x][1]).abs())) / sites as f64)
}

/// Simulation from the product measure with slowly varying parameter
/// against the PDE solution, for each lattice size.
pub fn hydrodynamic_sweep(thermo: &Thermo, profile: &Profile, settings: &SweepSettings) -> Result<ConvergenceSweep, VerifyError> {
    let s = settings;
    if s.n_list.is_empty() || s.t_macro.is_empty() || s.replicas == 0 {
        return Err(VerifyError::InvalidInput("sweep needs lattice sizes, times and replicas".into()));
    }
    if s.t_macro.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || s.t_macro.windows(2).any(|w| w[1] <= w[0]) {
        return Err(VerifyError::InvalidInput("sweep times must be non-negative and increasing".into()));
    }
    let m = s.pde_m;
    let rho0 = profile.grid_values(m, s.d);
    let fields = [rho0.iter().map(|v| v[0]).collect(), rho0.iter().map(|v| v[1]).collect()];
    let pde_times: Vec<f64> = s.t_macro.iter().copied().filter(|t| *t > 0.0).collect();
    let pde: Option<PdeRun> = if pde_times.is_empty() {
        None
    } else {
        Some(solve_system(thermo, fields, m, s.d, &pde_times, s.safety)?)
    };
    // the initial profile is used exactly; later times interpolate the PDE grid
    let reference_at = |t: f64, u: &[f64]| match &pde {
        Some(run) if t > 0.0 => run.frames.iter().find(|f| f.t == t).expect("frame per requested time").interpolate(u),
        _ => profile.eval(u),
    };
    let rate = thermo.rate();
    let mut rows = Vec::new();
    let mut frozen = 0u64;
    for &n in &s.n_list {
        let torus = Torus::new(n, s.d)?;
        let ell = s.ell.ell(n);
        if 2 * ell + 1 > n {
            return Err(VerifyError::Lattice(LatticeError::WindowTooLarge { ell, n }));
        }
        let product = slowly_varying_product(thermo, |u| profile.eval(u), torus, s.tail_tol)?;
        let seed = derive_seed(s.seed, u64::from(n));
        let records = run(rate, |sd, r| product.sample(sd, r), &s.t_macro, seed, s.replicas)?;
        frozen += records.iter().filter(|r| r.frozen).count() as u64;
        for (k, &t) in s.t_macro.iter().enumerate() {
            let reference: Vec<[f64; 2]> = (0..torus.sites()).map(|x| reference_at(t, &torus.macro_point(x))).collect();
            let errors: Vec<f64> = records
                .par_iter()
                .map(|rec| l1_distance(&rec.snapshots[k].config, ell, &reference))
                .collect::<Result<_, _>>()?;
            let (mean, se) = mean_stderr(&errors);
            rows.push(SweepRow {
                n,
                t_macro: t,
                ell,
                l1_error: mean,
                stderr: se,
                replicas: s.replicas,
            });
        }
    }
    let t_last = *s.t_macro.last().expect("checked non-empty");
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.t_macro == t_last)
        .map(|r| (f64::from(r.n).ln(), r.l1_error.ln()))
        .unzip();
    let (rate_fit, residual) = if xs.len() >= 2 {
        let (slope, _, rms) = fit_line(&xs, &ys);
        (-slope, rms)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ConvergenceSweep {
        settings: s.clone(),
        rows,
        fitted_rate: rate_fit,
        fit_residual: residual,
        pde_breach: pde.as_ref().is_some_and(|p| p.report.breach.is_some()),
        frozen_replicas: frozen,
    })
}
