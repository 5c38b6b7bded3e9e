//! Explicit conservative solver for `∂ₜρ = ΔΦ(ρ)` on the flat torus `T^d`,
//! with the scalar and decoupled species-blind routes and an
//! invariant-region monitor.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::rates::ClosedForm;
use crate::thermo::{OneSpeciesThermo, Thermo, ThermoError};

/// Distance outside the sub-critical region tolerated before aborting.
pub const BREACH_TOL: f64 = 1e-8;
/// Steps between re-evaluations of the spectral bound.
pub const SPECTRAL_REFRESH: u64 = 100;
/// Nodes in the `Φ̂` lookup table.
pub const TABLE_NODES: usize = 2048;
/// Tolerated relative drift of per-species mass.
pub const MASS_TOL: f64 = 1e-10;

const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("density {value:?} at site {site} left the sub-critical region at t = {t}")]
    Criticality { t: f64, site: usize, value: [f64; 2] },
    #[error("non-finite field value at site {site}, t = {t}")]
    NonFinite { t: f64, site: usize },
    #[error("species {species} mass drifted by {drift:e} (relative)")]
    Mass { species: usize, drift: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ExplicitSystem,
    ExplicitScalar,
    Decoupled,
}

/// Two density fields on the grid `{j/M}^d`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeField {
    pub m: usize,
    pub d: u32,
    pub rho: [Vec<f64>; 2],
    pub t: f64,
    /// Last step size taken before this frame.
    pub dt: f64,
    pub scheme: Scheme,
}

impl PdeField {
    pub fn mass(&self) -> [f64; 2] {
        [kahan_sum(&self.rho[0]), kahan_sum(&self.rho[1])]
    }

    /// Multilinear interpolation at `u ∈ T^d`.
    pub fn interpolate(&self, u: &[f64]) -> [f64; 2] {
        [
            interpolate(&self.rho[0], self.m, self.d, u),
            interpolate(&self.rho[1], self.m, self.d, u),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarField {
    pub m: usize,
    pub d: u32,
    pub r: Vec<f64>,
    pub t: f64,
    pub dt: f64,
}

fn kahan_sum(v: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in v {
        let y = x - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

pub(crate) fn interpolate(f: &[f64], m: usize, d: u32, u: &[f64]) -> f64 {
    let d = d as usize;
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for j in 0..d {
        let x = u[j].rem_euclid(1.0) * m as f64;
        let i = x.floor();
        base[j] = (i as usize) % m;
        frac[j] = x - i;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = 0usize;
        for j in 0..d {
            let up = (corner >> j) & 1 == 1;
            w *= if up { frac[j] } else { 1.0 - frac[j] };
            idx = idx * m + if up { (base[j] + 1) % m } else { base[j] };
        }
        if w != 0.0 {
            acc += w * f[idx];
        }
    }
    acc
}

/// `Δ_h f` with the `2d+1`-point periodic stencil, `h = 1/M`.
pub fn laplacian(f: &[f64], m: usize, d: u32, out: &mut [f64]) {
    let inv_h2 = (m * m) as f64;
    let strides: Vec<usize> = (0..d).map(|j| m.pow(d - 1 - j)).collect();
    let kernel = |x: usize| {
        let mut s = 0.0;
        for &stride in &strides {
            let c = (x / stride) % m;
            let base = x - c * stride;
            s += f[base + ((c + 1) % m) * stride] + f[base + ((c + m - 1) % m) * stride] - 2.0 * f[x];
        }
        s * inv_h2
    };
    if f.len() >= PAR_THRESHOLD {
        out.par_iter_mut().enumerate().for_each(|(x, o)| *o = kernel(x));
    } else {
        for (x, o) in out.iter_mut().enumerate() {
            *o = kernel(x);
        }
    }
}

/// Cubic Hermite table of `Φ̂` on `[0, r_max]`, built from fugacity nodes
/// `s_j` with `r_j = R̂(s_j)` and slope `dΦ̂/dr = s / Var_s`.
#[derive(Debug, Clone)]
pub struct PhiHatTable {
    r: Vec<f64>,
    s: Vec<f64>,
    slope: Vec<f64>,
    critical: bool,
}

impl PhiHatTable {
    pub fn build(axis: &OneSpeciesThermo, r_hi: f64, nodes: usize) -> Result<Self, ThermoError> {
        if !(r_hi > 0.0 && r_hi.is_finite()) || nodes < 2 {
            return Err(ThermoError::InvalidInput(format!("table range {r_hi} with {nodes} nodes")));
        }
        let crit = axis.critical();
        let critical = crit.rho_c.is_finite() && r_hi >= crit.rho_c;
        let s_max = if critical { crit.phi_c } else { axis.inverse(r_hi)? };
        let g1 = axis.base().eval(1);
        let rows: Vec<Result<(f64, f64, f64), ThermoError>> = (0..nodes)
            .into_par_iter()
            .map(|j| {
                if j == 0 {
                    return Ok((0.0, 0.0, g1));
                }
                let s = s_max * j as f64 / (nodes - 1) as f64;
                let sum = axis.summary(s)?;
                let var = sum.second[0] - sum.mean[0] * sum.mean[0];
                let slope = if var > 0.0 && var.is_finite() { s / var } else { f64::NAN };
                Ok((sum.mean[0], s, slope))
            })
            .collect();
        let mut r = Vec::with_capacity(nodes);
        let mut s = Vec::with_capacity(nodes);
        let mut slope = Vec::with_capacity(nodes);
        for row in rows {
            let (a, b, c) = row?;
            r.push(a);
            s.push(b);
            slope.push(c);
        }
        if let Some(last) = slope.last_mut() {
            // an infinite variance at the critical node: one-sided secant
            if !last.is_finite() {
                let n = r.len();
                *last = (s[n - 1] - s[n - 2]) / (r[n - 1] - r[n - 2]);
            }
        }
        if r.windows(2).any(|w| !(w[1] > w[0])) || slope.iter().any(|x| !x.is_finite()) {
            return Err(ThermoError::NonFinite("Φ̂ table nodes are not strictly increasing".into()));
        }
        Ok(Self { r, s, slope, critical })
    }

    pub fn r_max(&self) -> f64 {
        *self.r.last().expect("non-empty table")
    }

    /// True when the table ends at the critical density.
    pub fn is_critical(&self) -> bool {
        self.critical
    }

    /// `(Φ̂(r), Φ̂'(r))`; `None` beyond the table (after the breach tolerance).
    pub fn eval(&self, r: f64) -> Option<(f64, f64)> {
        let n = self.r.len();
        if r >= self.r[n - 1] {
            return if r <= self.r[n - 1] + BREACH_TOL {
                Some((self.s[n - 1], self.slope[n - 1]))
            } else {
                None
            };
        }
        let r = r.max(0.0);
        let i = self.r.partition_point(|&x| x <= r).clamp(1, n - 1) - 1;
        let h = self.r[i + 1] - self.r[i];
        let t = (r - self.r[i]) / h;
        let (p0, p1) = (self.s[i], self.s[i + 1]);
        let (m0, m1) = (self.slope[i] * h, self.slope[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let value = (2.0 * t3 - 3.0 * t2 + 1.0) * p0 + (t3 - 2.0 * t2 + t) * m0 + (-2.0 * t3 + 3.0 * t2) * p1 + (t3 - t2) * m1;
        let deriv = ((6.0 * t2 - 6.0 * t) * p0 + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (-6.0 * t2 + 6.0 * t) * p1 + (3.0 * t2 - 2.0 * t) * m1) / h;
        Some((value, deriv))
    }
}

/// `Φ̂` for a species-blind base: closed forms where available, table otherwise.
#[derive(Debug, Clone)]
pub enum BlindMobility {
    Linear,
    Constant,
    Table(PhiHatTable),
}

impl BlindMobility {
    /// Covers densities up to `r_hi` (or the critical density, whichever is smaller).
    pub fn new(axis: &OneSpeciesThermo, r_hi: f64) -> Result<Self, ThermoError> {
        Ok(match axis.base().tag() {
            ClosedForm::Linear => BlindMobility::Linear,
            ClosedForm::Constant => BlindMobility::Constant,
            _ => BlindMobility::Table(PhiHatTable::build(axis, r_hi, TABLE_NODES)?),
        })
    }

    /// `(Φ̂(r), Φ̂'(r))`, `None` outside the admissible range.
    pub fn phi_hat(&self, r: f64) -> Option<(f64, f64)> {
        if r < -BREACH_TOL || r.is_nan() {
            return None;
        }
        let r = r.max(0.0);
        match self {
            BlindMobility::Linear => Some((r, 1.0)),
            BlindMobility::Constant => Some((r / (1.0 + r), 1.0 / ((1.0 + r) * (1.0 + r)))),
            BlindMobility::Table(t) => t.eval(r),
        }
    }

    /// `a(r) = Φ̂(r)/r`, continued by `Φ̂'(0)` at the origin.
    fn coefficient(&self, r: f64) -> Option<f64> {
        let (v, dv) = self.phi_hat(r)?;
        Some(if r > 1e-300 { v / r } else { dv })
    }

    /// `Φ(ρ) = ρ a(|ρ|₁)` and the Frobenius norm of `DΦ = a I + ρ ⊗ ∇a`.
    fn system(&self, rho: [f64; 2]) -> Option<([f64; 2], f64)> {
        let r = rho[0] + rho[1];
        let (v, dv) = self.phi_hat(r)?;
        let (a, da) = if r > 1e-12 { (v / r, (dv * r - v) / (r * r)) } else { (dv, 0.0) };
        let rho = [rho[0].max(0.0), rho[1].max(0.0)];
        let j = [[a + rho[0] * da, rho[0] * da], [rho[1] * da, a + rho[1] * da]];
        let frob = (j[0][0].powi(2) + j[0][1].powi(2) + j[1][0].powi(2) + j[1][1].powi(2)).sqrt();
        Some(([rho[0] * a, rho[1] * a], frob))
    }
}

/// Output times must be finite, non-negative and strictly increasing.
fn check_times(times: &[f64]) -> Result<(), PdeError> {
    if times.is_empty() {
        return Err(PdeError::InvalidInput("empty output time grid".into()));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PdeError::InvalidInput(format!(
            "output times must be finite, non-negative and strictly increasing: {times:?}"
        )));
    }
    Ok(())
}

fn check_grid(len: usize, m: usize, d: u32, safety: f64) -> Result<(), PdeError> {
    if m < 3 || d == 0 {
        return Err(PdeError::InvalidInput(format!("grid needs M ≥ 3 and d ≥ 1 (M={m}, d={d})")));
    }
    if m.checked_pow(d) != Some(len) {
        return Err(PdeError::InvalidInput(format!("field of length {len} on an M={m}, d={d} grid")));
    }
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(PdeError::InvalidInput(format!("safety factor must lie in (0,1], got {safety}")));
    }
    Ok(())
}

/// Run summary shared by the solvers.
#[derive(Debug, Clone, Serialize)]
pub struct PdeRun {
    pub scheme: Scheme,
    pub frames: Vec<PdeField>,
    pub steps: u64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub safety: f64,
    /// Largest relative per-species mass drift over the stored frames.
    pub mass_drift: [f64; 2],
    pub report: InvariantRegionReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalarRun {
    pub frames: Vec<ScalarField>,
    pub steps: u64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub mass_drift: f64,
}

/// Per-step driver: `flux` fills `Φ` values for the current state and
/// reports the spectral bound, `advance` applies the update.
struct Clock {
    h2: f64,
    two_d: f64,
    safety: f64,
    dt: f64,
    steps: u64,
    dt_min: f64,
    dt_max: f64,
    last: f64,
}

impl Clock {
    fn new(m: usize, d: u32, safety: f64) -> Self {
        Self {
            h2: 1.0 / (m * m) as f64,
            two_d: 2.0 * f64::from(d),
            safety,
            dt: f64::INFINITY,
            steps: 0,
            dt_min: f64::INFINITY,
            dt_max: 0.0,
            last: 0.0,
        }
    }

    fn refresh_due(&self) -> bool {
        self.steps % SPECTRAL_REFRESH == 0
    }

    fn set_bound(&mut self, lambda: f64) {
        self.dt = if lambda > 0.0 { self.safety * self.h2 / (self.two_d * lambda) } else { f64::INFINITY };
    }

    fn take(&mut self, t: f64, target: f64) -> f64 {
        let remaining = target - t;
        // avoid a sliver step just before an output time
        let dt = if self.dt >= remaining || remaining - self.dt < 1e-9 * self.dt {
            remaining
        } else {
            self.dt
        };
        self.steps += 1;
        self.dt_min = self.dt_min.min(dt);
        self.dt_max = self.dt_max.max(dt);
        self.last = dt;
        dt
    }
}

fn relative_drift(now: f64, start: f64) -> f64 {
    if start.abs() > 0.0 {
        (now - start).abs() / start.abs()
    } else {
        now.abs()
    }
}

fn validate_fields(rho0: &[Vec<f64>; 2], m: usize, d: u32, safety: f64) -> Result<(), PdeError> {
    check_grid(rho0[0].len(), m, d, safety)?;
    check_grid(rho0[1].len(), m, d, safety)?;
    for (i, f) in rho0.iter().enumerate() {
        if let Some(x) = f.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PdeError::InvalidInput(format!(
                "initial species {} must be finite and non-negative (site {x}: {})",
                i + 1,
                f[x]
            )));
        }
    }
    Ok(())
}

/// Solves the full system `ρ^{n+1} = ρ^n + dt Δ_h Φ(ρ^n)`, storing frames at
/// `t = 0` and each entry of `times`. Species-blind rates evaluate `Φ`
/// through `Φ̂`; other rates call the thermodynamic Newton solver per point.
pub fn solve_system(
    thermo: &Thermo,
    rho0: [Vec<f64>; 2],
    m: usize,
    d: u32,
    times: &[f64],
    safety: f64,
) -> Result<PdeRun, PdeError> {
    validate_fields(&rho0, m, d, safety)?;
    check_times(times)?;
    let sites = rho0[0].len();
    let mobility = match thermo.hat() {
        Some(hat) => {
            let r_hi = (0..sites).map(|x| rho0[0][x] + rho0[1][x]).fold(0.0, f64::max);
            Some(BlindMobility::new(hat, 2.0 * r_hi + 1.0)?)
        }
        None => None,
    };
    let critical = thermo.hat_critical().map_or(f64::INFINITY, |c| c.rho_c);
    let eval = |rho: [f64; 2], t: f64, x: usize| -> Result<([f64; 2], Option<f64>), PdeError> {
        let out_of_region = || PdeError::Criticality { t, site: x, value: rho };
        if rho[0] < -BREACH_TOL || rho[1] < -BREACH_TOL {
            return Err(out_of_region());
        }
        match &mobility {
            Some(mob) => {
                if rho[0] + rho[1] > critical + BREACH_TOL {
                    return Err(out_of_region());
                }
                mob.system(rho).map(|(f, l)| (f, Some(l))).ok_or_else(out_of_region)
            }
            None => {
                let r = [rho[0].max(0.0), rho[1].max(0.0)];
                match thermo.mean_jump_rate(r) {
                    Ok(f) => Ok((f, None)),
                    Err(ThermoError::Supercritical { .. }) => Err(out_of_region()),
                    Err(e) => Err(e.into()),
                }
            }
        }
    };
    let spectral = |rho: [f64; 2], t: f64, x: usize| -> Result<f64, PdeError> {
        if let (_, Some(l)) = eval(rho, t, x)? {
            return Ok(l);
        }
        if rho[0] <= 0.0 || rho[1] <= 0.0 {
            // one species absent: the axis derivative bounds the spectrum
            let i = if rho[0] > 0.0 { 0 } else { 1 };
            let h = 1e-6 * (1.0 + rho[i]);
            let mut up = [0.0; 2];
            up[i] = rho[i] + h;
            let mut dn = [0.0; 2];
            dn[i] = (rho[i] - h).max(0.0);
            let fu = thermo.mean_jump_rate(up)?;
            let fd = thermo.mean_jump_rate(dn)?;
            return Ok(2.0 * (fu[i] - fd[i]).abs() / (up[i] - dn[i]));
        }
        let j = thermo.mean_jump_rate_jacobian(rho)?;
        Ok((j[0][0].powi(2) + j[0][1].powi(2) + j[1][0].powi(2) + j[1][1].powi(2)).sqrt())
    };

    let mut rho = rho0;
    let mass0 = [kahan_sum(&rho[0]), kahan_sum(&rho[1])];
    let mut clock = Clock::new(m, d, safety);
    let mut t = 0.0;
    let mut flux = [vec![0.0; sites], vec![0.0; sites]];
    let mut lap = vec![0.0; sites];
    let mut frames = vec![PdeField {
        m,
        d,
        rho: rho.clone(),
        t: 0.0,
        dt: 0.0,
        scheme: Scheme::ExplicitSystem,
    }];
    for x in 0..sites {
        eval([rho[0][x], rho[1][x]], 0.0, x)?;
    }
    for &target in times {
        while t < target {
            if clock.refresh_due() {
                let lambda = (0..sites)
                    .into_par_iter()
                    .map(|x| spectral([rho[0][x], rho[1][x]], t, x))
                    .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
                clock.set_bound(lambda);
            }
            let values: Vec<[f64; 2]> = if sites >= PAR_THRESHOLD || mobility.is_none() {
                (0..sites)
                    .into_par_iter()
                    .map(|x| eval([rho[0][x], rho[1][x]], t, x).map(|v| v.0))
                    .collect::<Result<_, _>>()?
            } else {
                (0..sites)
                    .map(|x| eval([rho[0][x], rho[1][x]], t, x).map(|v| v.0))
                    .collect::<Result<_, _>>()?
            };
            for (x, v) in values.iter().enumerate() {
                flux[0][x] = v[0];
                flux[1][x] = v[1];
            }
            let dt = clock.take(t, target);
            for i in 0..2 {
                laplacian(&flux[i], m, d, &mut lap);
                for (r, l) in rho[i].iter_mut().zip(&lap) {
                    *r += dt * l;
                }
            }
            t = if dt == target - t { target } else { t + dt };
            if let Some(x) = (0..sites).find(|&x| !(rho[0][x].is_finite() && rho[1][x].is_finite())) {
                return Err(PdeError::NonFinite { t, site: x });
            }
        }
        frames.push(PdeField {
            m,
            d,
            rho: rho.clone(),
            t,
            dt: clock.last,
            scheme: Scheme::ExplicitSystem,
        });
    }
    finish(frames, clock, safety, mass0, critical, Scheme::ExplicitSystem)
}

fn finish(
    frames: Vec<PdeField>,
    clock: Clock,
    safety: f64,
    mass0: [f64; 2],
    critical: f64,
    scheme: Scheme,
) -> Result<PdeRun, PdeError> {
    let mut drift = [0.0f64; 2];
    for f in &frames {
        let mass = f.mass();
        for i in 0..2 {
            drift[i] = drift[i].max(relative_drift(mass[i], mass0[i]));
        }
    }
    for (i, &dr) in drift.iter().enumerate() {
        if dr > MASS_TOL {
            return Err(PdeError::Mass { species: i, drift: dr });
        }
    }
    let report = invariant_region_monitor(&frames, critical);
    Ok(PdeRun {
        scheme,
        frames,
        steps: clock.steps,
        dt_min: clock.dt_min,
        dt_max: clock.dt_max,
        safety,
        mass_drift: drift,
        report,
    })
}

/// Solves `∂ₜr = ΔΦ̂(r)` for a one-species rate.
pub fn solve_scalar(axis: &OneSpeciesThermo, r0: Vec<f64>, m: usize, d: u32, times: &[f64], safety: f64) -> Result<ScalarRun, PdeError> {
    check_grid(r0.len(), m, d, safety)?;
    check_times(times)?;
    if let Some(x) = r0.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(PdeError::InvalidInput(format!("initial density must be finite and non-negative (site {x})")));
    }
    let r_hi = r0.iter().cloned().fold(0.0, f64::max);
    let mobility = BlindMobility::new(axis, 2.0 * r_hi + 1.0)?;
    let sites = r0.len();
    let mass0 = kahan_sum(&r0);
    let mut r = r0;
    let mut clock = Clock::new(m, d, safety);
    let mut t = 0.0;
    let mut flux = vec![0.0; sites];
    let mut lap = vec![0.0; sites];
    let mut frames = vec![ScalarField {
        m,
        d,
        r: r.clone(),
        t: 0.0,
        dt: 0.0,
    }];
    let mut slopes = vec![0.0; sites];
    for &target in times {
        while t < target {
            for x in 0..sites {
                let (v, dv) = mobility.phi_hat(r[x]).ok_or(PdeError::Criticality {
                    t,
                    site: x,
                    value: [r[x], 0.0],
                })?;
                flux[x] = v;
                slopes[x] = dv;
            }
            if clock.refresh_due() {
                clock.set_bound(slopes.iter().cloned().fold(0.0, f64::max));
            }
            let dt = clock.take(t, target);
            laplacian(&flux, m, d, &mut lap);
            for (a, l) in r.iter_mut().zip(&lap) {
                *a += dt * l;
            }
            t = if dt == target - t { target } else { t + dt };
            if let Some(x) = r.iter().position(|v| !v.is_finite()) {
                return Err(PdeError::NonFinite { t, site: x });
            }
        }
        frames.push(ScalarField {
            m,
            d,
            r: r.clone(),
            t,
            dt: clock.last,
        });
    }
    let drift = frames.iter().map(|f| relative_drift(kahan_sum(&f.r), mass0)).fold(0.0, f64::max);
    if drift > MASS_TOL {
        return Err(PdeError::Mass { species: 0, drift });
    }
    Ok(ScalarRun {
        frames,
        steps: clock.steps,
        dt_min: clock.dt_min,
        dt_max: clock.dt_max,
        mass_drift: drift,
    })
}

/// The decoupled species-blind route: the sum `r = ρ₁ + ρ₂` solves the
/// scalar equation and each species the linear equation
/// `∂ₜρᵢ = Δ(a ρᵢ)`, `a = Φ̂(r)/r`, advanced in lockstep on one time grid.
#[derive(Debug, Clone, Serialize)]
pub struct DecoupledRun {
    pub system: PdeRun,
    /// Scalar-stage sum at the same frames.
    pub sum: Vec<ScalarField>,
}

pub fn solve_species_blind_decoupled(
    axis: &OneSpeciesThermo,
    rho0: [Vec<f64>; 2],
    m: usize,
    d: u32,
    times: &[f64],
    safety: f64,
) -> Result<DecoupledRun, PdeError> {
    validate_fields(&rho0, m, d, safety)?;
    check_times(times)?;
    let sites = rho0[0].len();
    let mut r: Vec<f64> = (0..sites).map(|x| rho0[0][x] + rho0[1][x]).collect();
    let r_hi = r.iter().cloned().fold(0.0, f64::max);
    let mobility = BlindMobility::new(axis, 2.0 * r_hi + 1.0)?;
    let critical = axis.critical().rho_c;
    let mass0 = [kahan_sum(&rho0[0]), kahan_sum(&rho0[1])];
    let mut rho = rho0;
    let mut clock = Clock::new(m, d, safety);
    let mut t = 0.0;
    let (mut phi, mut coef, mut bound) = (vec![0.0; sites], vec![0.0; sites], vec![0.0; sites]);
    let mut work = vec![0.0; sites];
    let mut lap = vec![0.0; sites];
    let mut frames = vec![PdeField {
        m,
        d,
        rho: rho.clone(),
        t: 0.0,
        dt: 0.0,
        scheme: Scheme::Decoupled,
    }];
    let mut sums = vec![ScalarField {
        m,
        d,
        r: r.clone(),
        t: 0.0,
        dt: 0.0,
    }];
    for &target in times {
        while t < target {
            for x in 0..sites {
                let crit = || PdeError::Criticality {
                    t,
                    site: x,
                    value: [rho[0][x], rho[1][x]],
                };
                if r[x] > critical + BREACH_TOL {
                    return Err(crit());
                }
                let (v, dv) = mobility.phi_hat(r[x]).ok_or_else(crit)?;
                phi[x] = v;
                coef[x] = mobility.coefficient(r[x]).ok_or_else(crit)?;
                bound[x] = dv.max(coef[x]);
            }
            if clock.refresh_due() {
                clock.set_bound(bound.iter().cloned().fold(0.0, f64::max));
            }
            let dt = clock.take(t, target);
            laplacian(&phi, m, d, &mut lap);
            for (a, l) in r.iter_mut().zip(&lap) {
                *a += dt * l;
            }
            for field in rho.iter_mut() {
                for x in 0..sites {
                    work[x] = coef[x] * field[x];
                }
                laplacian(&work, m, d, &mut lap);
                for (a, l) in field.iter_mut().zip(&lap) {
                    *a += dt * l;
                }
            }
            t = if dt == target - t { target } else { t + dt };
            if let Some(x) = (0..sites).find(|&x| !(rho[0][x].is_finite() && rho[1][x].is_finite() && r[x].is_finite())) {
                return Err(PdeError::NonFinite { t, site: x });
            }
        }
        let dt = clock.last;
        frames.push(PdeField {
            m,
            d,
            rho: rho.clone(),
            t,
            dt,
            scheme: Scheme::Decoupled,
        });
        sums.push(ScalarField { m, d, r: r.clone(), t, dt });
    }
    Ok(DecoupledRun {
        system: finish(frames, clock, safety, mass0, critical, Scheme::Decoupled)?,
        sum: sums,
    })
}

/// Where a trajectory first left the region `{ρ > 0, ρ₁+ρ₂ < ρ̂_c}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Breach {
    pub frame: usize,
    pub t: f64,
    pub site: usize,
    pub kind: BreachKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BreachKind {
    NonFinite,
    /// A species that was positive everywhere at `t = 0` reached zero.
    NonPositive { species: usize },
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantRegionReport {
    pub min_rho: [f64; 2],
    pub max_rho: [f64; 2],
    pub max_sum: f64,
    pub initial_min_rho: [f64; 2],
    pub initial_max_rho: [f64; 2],
    pub initial_max_sum: f64,
    pub critical_density: f64,
    /// All later extrema lie within the `t = 0` extrema (up to roundoff).
    pub within_initial_envelope: bool,
    pub breach: Option<Breach>,
}

/// Extrema of a stored trajectory and the first exit from the invariant
/// region, if any.
pub fn invariant_region_monitor(frames: &[PdeField], critical_density: f64) -> InvariantRegionReport {
    let extrema = |f: &PdeField| {
        let mut mn = [f64::INFINITY; 2];
        let mut mx = [f64::NEG_INFINITY; 2];
        let mut sum = f64::NEG_INFINITY;
        for x in 0..f.rho[0].len() {
            for i in 0..2 {
                mn[i] = mn[i].min(f.rho[i][x]);
                mx[i] = mx[i].max(f.rho[i][x]);
            }
            sum = sum.max(f.rho[0][x] + f.rho[1][x]);
        }
        (mn, mx, sum)
    };
    let Some(first) = frames.first() else {
        return InvariantRegionReport {
            min_rho: [f64::NAN; 2],
            max_rho: [f64::NAN; 2],
            max_sum: f64::NAN,
            initial_min_rho: [f64::NAN; 2],
            initial_max_rho: [f64::NAN; 2],
            initial_max_sum: f64::NAN,
            critical_density,
            within_initial_envelope: true,
            breach: None,
        };
    };
    let (mn0, mx0, sum0) = extrema(first);
    let (mut mn, mut mx, mut sum) = (mn0, mx0, sum0);
    let mut breach = None;
    for (k, f) in frames.iter().enumerate() {
        for x in 0..f.rho[0].len() {
            let v = [f.rho[0][x], f.rho[1][x]];
            for i in 0..2 {
                mn[i] = mn[i].min(v[i]);
                mx[i] = mx[i].max(v[i]);
            }
            sum = sum.max(v[0] + v[1]);
            if breach.is_some() {
                continue;
            }
            let kind = if !(v[0].is_finite() && v[1].is_finite()) {
                Some(BreachKind::NonFinite)
            } else if let Some(i) = (0..2).find(|&i| mn0[i] > 0.0 && v[i] <= 0.0) {
                Some(BreachKind::NonPositive { species: i })
            } else if v[0] + v[1] >= critical_density {
                Some(BreachKind::Critical)
            } else {
                None
            };
            if let Some(kind) = kind {
                breach = Some(Breach { frame: k, t: f.t, site: x, kind });
            }
        }
    }
    let tol = |a: f64| 1e-12 * (1.0 + a.abs());
    let within = breach.is_none()
        && (0..2).all(|i| mn[i] >= mn0[i] - tol(mn0[i]) && mx[i] <= mx0[i] + tol(mx0[i]))
        && sum <= sum0 + tol(sum0);
    InvariantRegionReport {
        min_rho: mn,
        max_rho: mx,
        max_sum: sum,
        initial_min_rho: mn0,
        initial_max_rho: mx0,
        initial_max_sum: sum0,
        critical_density,
        within_initial_envelope: within,
        breach,
    }
}

/// Writes `t,x,rho1,rho2` rows for every frame.
pub fn write_frames_csv(frames: &[PdeField], path: &Path) -> Result<(), PdeError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "rho1", "rho2"])?;
    for f in frames {
        for x in 0..f.rho[0].len() {
            w.write_record(&[f.t.to_string(), x.to_string(), f.rho[0][x].to_string(), f.rho[1][x].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
