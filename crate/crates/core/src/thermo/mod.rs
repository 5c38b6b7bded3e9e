//! Grand-canonical thermodynamics of two-species zero range processes.
//!
//! The product invariant measures have one-site marginals
//! `ν̄_φ(k) = φ^k / (g!(k) Z(φ))`. Everything here is derived from the
//! partition function `Z`: the density `R = φ·∇log Z`, its inverse `Φ`,
//! the entropy `S` (Legendre transform of `log Z ∘ exp`), the maximiser
//! `Φ̄` extending `Φ` past criticality, and the large-deviation quantities
//! built from them.

mod fit;
mod hat;
pub mod series;

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rates::{Counts, JumpRate, OneSpeciesRate, RateError};

pub use hat::{HatCritical, OneSpeciesThermo};
pub use series::{SeriesOptions, SeriesSummary};

#[derive(Debug, Error)]
pub enum ThermoError {
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error("partition series diverges (detected at shell {shell})")]
    Divergent { shell: u32 },
    #[error("density {density:?} is super-critical (critical density {critical})")]
    Supercritical { density: [f64; 2], critical: f64 },
    #[error("{what} did not converge (residual {residual:e})")]
    NonConvergence { what: String, residual: f64 },
    #[error("partition series not converged within the tabulated box of extent {extent}")]
    BoxExhausted { extent: u32 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// How `Z` and its derivatives are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesRoute {
    /// Species-blind rates: `Z(φ) = Ẑ(φ1 + φ2)`, a one-dimensional series.
    Reduced,
    /// Double series over `(k1, k2)`.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermoOptions {
    pub series: SeriesOptions,
    /// Relative residual `|R(φ) − ρ|∞ / |ρ|∞` accepted by Newton.
    pub newton_tol: f64,
    pub newton_max_iter: u32,
    /// Bracket width of the golden-section search along `∂D_Z`.
    pub golden_tol: f64,
    /// Ray length used when the boundary of `D_Z` must be estimated.
    pub boundary_k_max: u32,
    /// Directions sampled for an estimated boundary.
    pub boundary_directions: usize,
}

impl Default for ThermoOptions {
    fn default() -> Self {
        Self {
            series: SeriesOptions::default(),
            newton_tol: 1e-12,
            newton_max_iter: 50,
            golden_tol: 1e-10,
            boundary_k_max: 20_000,
            boundary_directions: 65,
        }
    }
}

/// Grand-canonical state at one fugacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrandCanonicalPoint {
    pub fugacity: [f64; 2],
    pub log_z: f64,
    pub density: [f64; 2],
    /// `Cov(ν̄_φ)`.
    pub covariance: [[f64; 2]; 2],
    /// Last shell `|k|₁` included in the sum.
    pub truncation_k: u32,
    /// Relative tail bound on `Z`.
    pub truncation_error_bound: f64,
    /// Relative tail bound on the density (`∞` if the density diverges).
    pub density_error_bound: f64,
}

impl GrandCanonicalPoint {
    fn from_double(phi: [f64; 2], s: &SeriesSummary) -> Self {
        let c11 = s.second[0] - s.mean[0] * s.mean[0];
        let c12 = s.second[1] - s.mean[0] * s.mean[1];
        let c22 = s.second[2] - s.mean[1] * s.mean[1];
        Self {
            fugacity: phi,
            log_z: s.log_z,
            density: s.mean,
            covariance: [[c11, c12], [c12, c22]],
            truncation_k: s.shells,
            truncation_error_bound: s.z_error_bound,
            density_error_bound: s.density_error_bound,
        }
    }

    /// Lifts a one-species summary at `s = φ1 + φ2` using
    /// `R(φ) = A φ` and `Cov = diag(ρ) + A' φφᵀ`, where `A = E[m]/s` and
    /// `A' = (E[m(m−1)] − E[m]²)/s²`.
    fn from_reduced(phi: [f64; 2], s: f64, hat: &SeriesSummary) -> Self {
        let (density, covariance) = if s > 0.0 {
            let em = hat.mean[0];
            let a = em / s;
            let a_prime = (hat.second[0] - em - em * em) / (s * s);
            let rho = [phi[0] * a, phi[1] * a];
            let mut cov = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] = phi[i] * phi[j] * a_prime + if i == j { rho[i] } else { 0.0 };
                }
            }
            (rho, cov)
        } else {
            ([0.0; 2], [[0.0; 2]; 2])
        };
        Self {
            fugacity: phi,
            log_z: hat.log_z,
            density,
            covariance,
            truncation_k: hat.shells,
            truncation_error_bound: hat.z_error_bound,
            density_error_bound: hat.density_error_bound,
        }
    }
}

fn check_pair(v: [f64; 2], what: &str) -> Result<(), ThermoError> {
    if v.iter().all(|x| x.is_finite() && *x >= 0.0) {
        Ok(())
    } else {
        Err(ThermoError::InvalidInput(format!("{what} must be finite and non-negative, got {v:?}")))
    }
}

/// Sums the double series shell by shell in `|k|₁`. Tabulated rates are
/// summed only over shells inside their box.
pub fn partition_function(rate: &JumpRate, phi: [f64; 2], rel_tol: f64) -> Result<GrandCanonicalPoint, ThermoError> {
    let mut opts = SeriesOptions {
        rel_tol,
        ..SeriesOptions::default()
    };
    partition_function_with(rate, phi, &mut opts)
}

fn partition_function_with(
    rate: &JumpRate,
    phi: [f64; 2],
    opts: &mut SeriesOptions,
) -> Result<GrandCanonicalPoint, ThermoError> {
    check_pair(phi, "fugacity")?;
    if let Some(extent) = rate.box_extent() {
        opts.k_max_double = opts.k_max_double.min(extent);
        let s = series::double(rate, phi, opts)?;
        if !s.converged && s.shells >= extent {
            return Err(ThermoError::BoxExhausted { extent });
        }
        return Ok(GrandCanonicalPoint::from_double(phi, &s));
    }
    Ok(GrandCanonicalPoint::from_double(phi, &series::double(rate, phi, opts)?))
}

/// `|Z(φ) − Ẑ(φ1+φ2)| / Ẑ(φ1+φ2)` with both sides summed independently.
pub fn species_blind_z_identity_check(base: &OneSpeciesRate, phi: [f64; 2]) -> Result<f64, ThermoError> {
    let rate = crate::rates::species_blind_rate(base.clone());
    let direct = partition_function(&rate, phi, 1e-14)?;
    let hat = series::one_species(base, phi[0] + phi[1], &SeriesOptions::default())?;
    Ok(((direct.log_z - hat.log_z).exp() - 1.0).abs())
}

/// Parametrization of `∂D_Z` by the outward normal `(s, 1−s)`.
#[derive(Debug, Clone)]
enum Boundary {
    /// `D_Z = ℝ₊²`.
    None,
    /// Species-blind: the boundary point with normal `ŷ` is `φ̂_c ŷ`.
    Blind { phi_c: f64 },
    /// Gradient of the 1-homogeneous extension of `log φ_{c;1}` sampled at
    /// `s_j = j/(n−1)`: entries are `(H(s), H'(s))`.
    Estimated { h: Vec<f64>, dh: Vec<f64> },
}

impl Boundary {
    fn point(&self, s: f64) -> Option<[f64; 2]> {
        match self {
            Boundary::None => None,
            Boundary::Blind { phi_c } => Some([s * phi_c, (1.0 - s) * phi_c]),
            Boundary::Estimated { h, dh } => {
                let n = h.len();
                let x = s.clamp(0.0, 1.0) * (n - 1) as f64;
                let j = (x.floor() as usize).min(n - 2);
                let w = x - j as f64;
                let hv = (1.0 - w) * h[j] + w * h[j + 1];
                let dv = (1.0 - w) * dh[j] + w * dh[j + 1];
                if !hv.is_finite() || !dv.is_finite() {
                    return None;
                }
                Some([(hv + dv * (1.0 - s)).exp(), (hv - dv * s).exp()])
            }
        }
    }
}

/// Lattice-ray estimate of the directional critical fugacity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalFugacity {
    pub direction: [f64; 2],
    /// `φ_{c;1}(ŷ)`; `∞` when unbounded.
    pub value: f64,
    pub status: LimitStatus,
    /// Difference between extrapolations on two nested windows.
    pub spread: f64,
    /// Samples `(|k|₁, log g!(k)/|k|₁)` along the ray.
    pub trace: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitStatus {
    Converged,
    Unbounded,
    /// The two windowed extrapolations disagree beyond tolerance.
    Oscillating,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecessionEstimate {
    pub direction: [f64; 2],
    /// `S_∞(ŷ)`; `∞` for non-condensing directions.
    pub value: f64,
    pub status: LimitStatus,
    /// Samples `(t, S(tŷ)/t)`.
    pub trace: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseSample {
    /// Normal direction `ŷ` on the ℓ₁ unit sphere.
    pub direction: [f64; 2],
    /// Directional critical fugacity `φ_{c;1}(ŷ)` (ℓ₁ normalization).
    pub directional_fugacity: f64,
    /// Boundary fugacity with outward normal `ŷ`; `∞` when `D_Z` is unbounded there.
    pub boundary_fugacity: [f64; 2],
    /// `R` at the boundary fugacity; `∞` when the density diverges.
    pub critical_density: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseDiagram {
    pub rate: String,
    pub samples: Vec<PhaseSample>,
    pub condensing: bool,
}

impl PhaseDiagram {
    /// Columns `y1,y2,phi_c_1,phi_c_2,rho_c_1,rho_c_2`; `phi_c_*` are the
    /// components of the boundary fugacity with normal `y`.
    pub fn write_csv(&self, path: &Path) -> Result<(), ThermoError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["y1", "y2", "phi_c_1", "phi_c_2", "rho_c_1", "rho_c_2"])?;
        for s in &self.samples {
            w.write_record(
                [
                    s.direction[0],
                    s.direction[1],
                    s.boundary_fugacity[0],
                    s.boundary_fugacity[1],
                    s.critical_density[0],
                    s.critical_density[1],
                ]
                .iter()
                .map(|v| format_float(*v)),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.12e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioDiagnostic {
    /// `sup |Ψ(ρ,λ)|₁ / Λ*_ρ(λ)` over the grids.
    pub sup: f64,
    pub at_rho: [f64; 2],
    pub at_lambda: [f64; 2],
    pub pairs: usize,
}

/// One-site marginal `ν̄_φ` restricted to the states carrying all but
/// `tail` of the mass, listed shell by shell.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMarginal {
    pub fugacity: [f64; 2],
    pub states: Vec<Counts>,
    pub probs: Vec<f64>,
    pub tail: f64,
}

/// Thermodynamics of one rate with cached critical data.
#[derive(Debug, Clone)]
pub struct Thermo {
    rate: JumpRate,
    route: SeriesRoute,
    opts: ThermoOptions,
    hat: Option<OneSpeciesThermo>,
    axes: [OneSpeciesThermo; 2],
    boundary: OnceLock<Boundary>,
}

impl Thermo {
    /// Uses the reduced route for species-blind rates, the double series otherwise.
    pub fn new(rate: JumpRate) -> Self {
        let route = if rate.blind_base().is_some() { SeriesRoute::Reduced } else { SeriesRoute::Direct };
        Self::build(rate, route, ThermoOptions::default())
    }

    pub fn with_route(rate: JumpRate, route: SeriesRoute) -> Result<Self, ThermoError> {
        if route == SeriesRoute::Reduced && rate.blind_base().is_none() {
            return Err(ThermoError::InvalidInput(
                "the reduced series route needs a species-blind rate".into(),
            ));
        }
        Ok(Self::build(rate, route, ThermoOptions::default()))
    }

    pub fn with_options(rate: JumpRate, route: SeriesRoute, opts: ThermoOptions) -> Result<Self, ThermoError> {
        let mut t = Self::with_route(rate, route)?;
        t = Self::build(t.rate, t.route, opts);
        Ok(t)
    }

    fn build(rate: JumpRate, route: SeriesRoute, opts: ThermoOptions) -> Self {
        let mk = |b: OneSpeciesRate| OneSpeciesThermo::new(b, opts.series, opts.newton_tol);
        let hat = match route {
            SeriesRoute::Reduced => rate.blind_base().cloned().map(mk),
            SeriesRoute::Direct => None,
        };
        let axes = [mk(rate.axis_rate(0)), mk(rate.axis_rate(1))];
        Self {
            rate,
            route,
            opts,
            hat,
            axes,
            boundary: OnceLock::new(),
        }
    }

    pub fn rate(&self) -> &JumpRate {
        &self.rate
    }

    pub fn route(&self) -> SeriesRoute {
        self.route
    }

    pub fn options(&self) -> &ThermoOptions {
        &self.opts
    }

    /// One-species calculator seen by species `i` alone (`ρ = ρ_i e_i`).
    pub fn axis(&self, species: usize) -> &OneSpeciesThermo {
        &self.axes[species]
    }

    /// Calculator for the base rate `ĝ` (species-blind rates on the reduced route).
    pub fn hat(&self) -> Option<&OneSpeciesThermo> {
        self.hat.as_ref()
    }

    /// Critical data of the base rate (species-blind rates only).
    pub fn hat_critical(&self) -> Option<&HatCritical> {
        self.hat.as_ref().map(|h| h.critical())
    }

    pub fn grand_canonical(&self, phi: [f64; 2]) -> Result<GrandCanonicalPoint, ThermoError> {
        check_pair(phi, "fugacity")?;
        match &self.hat {
            Some(hat) => {
                let s = phi[0] + phi[1];
                let summary = hat.summary(s)?;
                Ok(GrandCanonicalPoint::from_reduced(phi, s, &summary))
            }
            None => partition_function_with(&self.rate, phi, &mut self.opts.series.clone()),
        }
    }

    pub fn log_z(&self, phi: [f64; 2]) -> Result<f64, ThermoError> {
        Ok(self.grand_canonical(phi)?.log_z)
    }

    /// `R(φ)`.
    pub fn density(&self, phi: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        Ok(self.grand_canonical(phi)?.density)
    }

    /// `Some(true)` when `ρ` is known to be strictly sub-critical,
    /// `Some(false)` when known super-critical, `None` when undecided.
    pub fn is_subcritical(&self, rho: [f64; 2]) -> Option<bool> {
        let hat = self.hat.as_ref()?;
        let rc = hat.critical().rho_c;
        if rc.is_nan() {
            None
        } else {
            Some(rho[0] + rho[1] < rc)
        }
    }

    /// `Φ(ρ)`: the fugacity with `R(φ) = ρ`, by damped Newton in
    /// log-fugacity with Jacobian `Cov(ν̄_φ)`.
    pub fn mean_jump_rate(&self, rho: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        check_pair(rho, "density")?;
        if rho[0] == 0.0 && rho[1] == 0.0 {
            return Ok([0.0, 0.0]);
        }
        for i in 0..2 {
            if rho[1 - i] == 0.0 {
                let mut out = [0.0; 2];
                out[i] = self.axes[i].inverse(rho[i]).map_err(|e| relabel_axis(e, i))?;
                return Ok(out);
            }
        }
        let init = match &self.hat {
            Some(hat) => {
                let r = rho[0] + rho[1];
                let s = hat.inverse(r).map_err(|e| match e {
                    ThermoError::Supercritical { critical, .. } => ThermoError::Supercritical { density: rho, critical },
                    e => e,
                })?;
                [rho[0] * s / r, rho[1] * s / r]
            }
            None => {
                let y = [rho[0] / (rho[0] + rho[1]), rho[1] / (rho[0] + rho[1])];
                let phi_c = self.boundary_scale(y);
                [rho[0].min(0.5 * phi_c * y[0]), rho[1].min(0.5 * phi_c * y[1])]
            }
        };
        self.newton(rho, init)
    }

    /// Rough `φ_{c;1}(ŷ)` used only for initialization.
    fn boundary_scale(&self, y: [f64; 2]) -> f64 {
        match self.boundary() {
            Boundary::None => f64::INFINITY,
            b => {
                let p = b.point(y[0]);
                p.map_or(f64::INFINITY, |p| (y[0] * p[0].ln() + y[1] * p[1].ln()).exp())
            }
        }
    }

    fn newton(&self, rho: [f64; 2], init: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        let scale = rho[0].max(rho[1]);
        let tol = self.opts.newton_tol * scale;
        let mut mu = [init[0].ln(), init[1].ln()];
        let mut point = self.grand_canonical([mu[0].exp(), mu[1].exp()])?;
        let resid_of = |p: &GrandCanonicalPoint| [rho[0] - p.density[0], rho[1] - p.density[1]];
        let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
        let mut resid = resid_of(&point);
        for _ in 0..self.opts.newton_max_iter {
            let step = solve2(point.covariance, resid).ok_or_else(|| ThermoError::NonConvergence {
                what: format!("mean jump rate at {rho:?} (singular covariance)"),
                residual: norm(resid),
            })?;
            if norm(resid) <= tol {
                // one polishing step, kept only if it helps
                let trial = [mu[0] + step[0], mu[1] + step[1]];
                if let Ok(p) = self.grand_canonical([trial[0].exp(), trial[1].exp()]) {
                    if norm(resid_of(&p)) < norm(resid) {
                        mu = trial;
                        resid = resid_of(&p);
                    }
                }
                break;
            }
            let big = step[0].abs().max(step[1].abs());
            let mut alpha = if big > 2.0 { 2.0 / big } else { 1.0 };
            let mut accepted = false;
            for _ in 0..40 {
                let trial = [mu[0] + alpha * step[0], mu[1] + alpha * step[1]];
                match self.grand_canonical([trial[0].exp(), trial[1].exp()]) {
                    Ok(p) if norm(resid_of(&p)) < norm(resid) => {
                        mu = trial;
                        resid = resid_of(&p);
                        point = p;
                        accepted = true;
                        break;
                    }
                    Ok(_) | Err(ThermoError::Divergent { .. }) | Err(ThermoError::BoxExhausted { .. }) => {
                        alpha *= 0.5
                    }
                    Err(e) => return Err(e),
                }
            }
            if !accepted {
                return Err(ThermoError::NonConvergence {
                    what: format!("mean jump rate at {rho:?}"),
                    residual: norm(resid),
                });
            }
        }
        if norm(resid) > tol {
            return Err(ThermoError::NonConvergence {
                what: format!("mean jump rate at {rho:?}"),
                residual: norm(resid),
            });
        }
        Ok([mu[0].exp(), mu[1].exp()])
    }

    fn boundary(&self) -> &Boundary {
        self.boundary.get_or_init(|| {
            if let Some(hat) = &self.hat {
                let phi_c = hat.critical().phi_c;
                return if phi_c.is_finite() { Boundary::Blind { phi_c } } else { Boundary::None };
            }
            let n = self.opts.boundary_directions.max(3);
            let k_max = self.opts.boundary_k_max;
            let h: Vec<f64> = (0..n)
                .map(|j| {
                    let s = j as f64 / (n - 1) as f64;
                    self.directional_critical_fugacity([s, 1.0 - s], k_max)
                        .map(|d| d.value.ln())
                        .unwrap_or(f64::NAN)
                })
                .collect();
            if h.iter().all(|v| v.is_infinite() && *v > 0.0) {
                return Boundary::None;
            }
            let dx = 1.0 / (n - 1) as f64;
            let dh: Vec<f64> = (0..n)
                .map(|j| {
                    if j == 0 {
                        (h[1] - h[0]) / dx
                    } else if j == n - 1 {
                        (h[n - 1] - h[n - 2]) / dx
                    } else {
                        (h[j + 1] - h[j - 1]) / (2.0 * dx)
                    }
                })
                .collect();
            Boundary::Estimated { h, dh }
        })
    }

    /// Boundary fugacity with outward normal `(s, 1−s)`, if `D_Z` is bounded there.
    pub fn boundary_point(&self, s: f64) -> Option<[f64; 2]> {
        self.boundary().point(s)
    }

    /// `Φ̄(ρ)`, the maximiser of `⟨ρ, log φ⟩ − log Z(φ)` over `D_Z`.
    pub fn extended_mean_jump_rate(&self, rho: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        check_pair(rho, "density")?;
        if rho[0] == 0.0 && rho[1] == 0.0 {
            return Ok([0.0, 0.0]);
        }
        for i in 0..2 {
            if rho[1 - i] == 0.0 {
                let mut out = [0.0; 2];
                out[i] = self.axes[i].extended_inverse(rho[i])?;
                return Ok(out);
            }
        }
        match self.is_subcritical(rho) {
            Some(true) => self.mean_jump_rate(rho),
            Some(false) => self.maximise_on_boundary(rho),
            None => match self.mean_jump_rate(rho) {
                Ok(phi) => Ok(phi),
                Err(ThermoError::NonConvergence { .. }) | Err(ThermoError::Divergent { .. }) => {
                    self.maximise_on_boundary(rho)
                }
                Err(e) => Err(e),
            },
        }
    }

    /// Golden-section search of `s ↦ ⟨ρ, log b(s)⟩ − log Z(b(s))` along the
    /// boundary parametrization `b`.
    fn maximise_on_boundary(&self, rho: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        let boundary = self.boundary();
        let objective = |s: f64| -> Result<f64, ThermoError> {
            let p = boundary.point(s).ok_or_else(|| ThermoError::NonConvergence {
                what: format!("boundary maximisation at {rho:?} (no boundary)"),
                residual: f64::NAN,
            })?;
            Ok(rho[0] * p[0].ln() + rho[1] * p[1].ln() - self.log_z(p)?)
        };
        let invphi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (1e-12, 1.0 - 1e-12);
        let mut c = b - invphi * (b - a);
        let mut d = a + invphi * (b - a);
        let mut fc = objective(c)?;
        let mut fd = objective(d)?;
        while b - a > self.opts.golden_tol {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - invphi * (b - a);
                fc = objective(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + invphi * (b - a);
                fd = objective(d)?;
            }
        }
        let s = 0.5 * (a + b);
        boundary.point(s).ok_or(ThermoError::NonConvergence {
            what: format!("boundary maximisation at {rho:?}"),
            residual: f64::NAN,
        })
    }

    /// `S(ρ) = ⟨ρ, log Φ̄(ρ)⟩ − log Z(Φ̄(ρ))` with `0·log 0 = 0`.
    pub fn thermodynamic_entropy(&self, rho: [f64; 2]) -> Result<f64, ThermoError> {
        let phi = self.extended_mean_jump_rate(rho)?;
        entropy_at(rho, phi, self.log_z(phi)?)
    }

    /// `R_c(ρ) = R(Φ̄(ρ))`.
    pub fn condensed_density(&self, rho: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        let phi = self.extended_mean_jump_rate(rho)?;
        let mut r = self.density(phi)?;
        // sub-critical points are fixed by construction; keep roundoff from breaking R_c ≤ ρ
        for i in 0..2 {
            r[i] = r[i].min(rho[i]);
        }
        Ok(r)
    }

    /// `Λ_ρ(λ) = log Z(e^λ Φ(ρ)) − log Z(Φ(ρ))`.
    pub fn log_mgf(&self, rho: [f64; 2], lambda: [f64; 2]) -> Result<f64, ThermoError> {
        let phi = self.mean_jump_rate(rho)?;
        let shifted = [lambda[0].exp() * phi[0], lambda[1].exp() * phi[1]];
        Ok(self.log_z(shifted)? - self.log_z(phi)?)
    }

    /// `Λ*_ρ(λ) = S(λ) − ⟨λ, log Φ(ρ)⟩ + log Z(Φ(ρ))`.
    pub fn rate_function(&self, rho: [f64; 2], lambda: [f64; 2]) -> Result<f64, ThermoError> {
        let phi = self.mean_jump_rate(rho)?;
        let log_z = self.log_z(phi)?;
        let s = self.thermodynamic_entropy(lambda)?;
        Ok(s - dot_log(lambda, phi) + log_z)
    }

    /// `DΦ(ρ)` by central differences with step `1e-5 (1 + |ρ|₁)`.
    pub fn mean_jump_rate_jacobian(&self, rho: [f64; 2]) -> Result<[[f64; 2]; 2], ThermoError> {
        let base_h = 1e-5 * (1.0 + rho[0] + rho[1]);
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let h = base_h.min(0.5 * rho[j]);
            if h <= 0.0 {
                return Err(ThermoError::InvalidInput(format!(
                    "Jacobian of the mean jump rate needs a strictly positive density, got {rho:?}"
                )));
            }
            let mut up = rho;
            let mut dn = rho;
            up[j] += h;
            dn[j] -= h;
            let fu = self.mean_jump_rate(up)?;
            let fd = self.mean_jump_rate(dn)?;
            for i in 0..2 {
                jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// `Ψ(ρ,λ) = Φ̄(λ) − Φ(ρ) − DΦ(ρ)(λ − ρ)`.
    pub fn quasi_potential(&self, rho: [f64; 2], lambda: [f64; 2]) -> Result<[f64; 2], ThermoError> {
        if rho == lambda {
            return Ok([0.0, 0.0]);
        }
        let phi = self.mean_jump_rate(rho)?;
        let jac = self.mean_jump_rate_jacobian(rho)?;
        let bar = self.extended_mean_jump_rate(lambda)?;
        Ok(quasi_potential_from(phi, jac, bar, rho, lambda))
    }

    /// `sup |Ψ(ρ,λ)|₁ / Λ*_ρ(λ)` over `ρ ∈ ks`, `λ ∈ lambdas`, `λ ≠ ρ`.
    pub fn ratio_diagnostic(&self, ks: &[[f64; 2]], lambdas: &[[f64; 2]]) -> Result<RatioDiagnostic, ThermoError> {
        let per_lambda: Vec<([f64; 2], f64)> = lambdas
            .iter()
            .map(|&l| {
                let bar = self.extended_mean_jump_rate(l)?;
                let s = entropy_at(l, bar, self.log_z(bar)?)?;
                Ok((bar, s))
            })
            .collect::<Result<_, ThermoError>>()?;
        let mut out = RatioDiagnostic {
            sup: 0.0,
            at_rho: [f64::NAN; 2],
            at_lambda: [f64::NAN; 2],
            pairs: 0,
        };
        for &rho in ks {
            let phi = self.mean_jump_rate(rho)?;
            let log_z = self.log_z(phi)?;
            let jac = self.mean_jump_rate_jacobian(rho)?;
            for (&lambda, &(bar, s)) in lambdas.iter().zip(&per_lambda) {
                if lambda == rho {
                    continue;
                }
                let rate = s - dot_log(lambda, phi) + log_z;
                if !(rate > 0.0) {
                    continue;
                }
                let psi = quasi_potential_from(phi, jac, bar, rho, lambda);
                let ratio = (psi[0].abs() + psi[1].abs()) / rate;
                if !ratio.is_finite() {
                    return Err(ThermoError::NonFinite(format!("ratio at rho={rho:?}, lambda={lambda:?}")));
                }
                out.pairs += 1;
                if ratio > out.sup || out.at_rho[0].is_nan() {
                    out.sup = ratio;
                    out.at_rho = rho;
                    out.at_lambda = lambda;
                }
            }
        }
        Ok(out)
    }

    /// `φ_{c;1}(ŷ) = lim g!(k)^{1/|k|₁}` along the monotone lattice path
    /// `k1(m) = round(m y1)`, extrapolated in `|k|₁`.
    pub fn directional_critical_fugacity(&self, y: [f64; 2], k_max: u32) -> Result<DirectionalFugacity, ThermoError> {
        check_pair(y, "direction")?;
        if ((y[0] + y[1]) - 1.0).abs() > 1e-9 {
            return Err(ThermoError::InvalidInput(format!("direction must have unit ℓ₁ norm, got {y:?}")));
        }
        let k_max = match self.rate.box_extent() {
            Some(extent) => {
                let ymax = y[0].max(y[1]);
                k_max.min((f64::from(extent) / ymax).floor() as u32)
            }
            None => k_max,
        };
        if k_max < 64 {
            return Err(ThermoError::InvalidInput(format!("ray length {k_max} too short to extrapolate")));
        }
        let mut v = Vec::with_capacity(k_max as usize + 1);
        v.push(0.0);
        let mut k = [0u32; 2];
        let mut acc = 0.0;
        for m in 1..=k_max {
            let k1 = ((f64::from(m) * y[0]).round() as u32).min(m);
            let species = if k1 > k[0] { 0 } else { 1 };
            k[species] += 1;
            let g = self.rate.eval(k)?[species];
            if !(g > 0.0 && g.is_finite()) {
                return Err(RateError::Degenerate {
                    species: species + 1,
                    k1: k[0],
                    k2: k[1],
                    value: g,
                }
                .into());
            }
            acc += g.ln();
            v.push(acc / f64::from(m));
        }
        let trace: Vec<(u32, f64)> = sample_indices(1, k_max, 128).into_iter().map(|m| (m, v[m as usize])).collect();
        let grow = v[k_max as usize] - v[(k_max / 2) as usize];
        if grow > 0.1 {
            return Ok(DirectionalFugacity {
                direction: y,
                value: f64::INFINITY,
                status: LimitStatus::Unbounded,
                spread: f64::NAN,
                trace,
            });
        }
        let window = |lo: u32, hi: u32| {
            let idx = sample_indices(lo.max(1), hi, 256);
            let ms: Vec<f64> = idx.iter().map(|&m| f64::from(m)).collect();
            let vs: Vec<f64> = idx.iter().map(|&m| v[m as usize]).collect();
            fit::log_corrected_limit(&ms, &vs).unwrap_or(v[hi as usize])
        };
        let outer = window(k_max / 8, k_max);
        let inner = window(k_max / 16, k_max / 2);
        let spread = (outer - inner).abs();
        Ok(DirectionalFugacity {
            direction: y,
            value: outer.exp(),
            status: if spread <= 1e-4 { LimitStatus::Converged } else { LimitStatus::Oscillating },
            spread,
            trace,
        })
    }

    /// `S_∞(ŷ) = lim S(tŷ)/t` for `|ŷ|₂ = 1`, extrapolated from
    /// `t ∈ {t_max 2^{-j}}`.
    pub fn recession_entropy(&self, y: [f64; 2], t_max: f64) -> Result<RecessionEstimate, ThermoError> {
        check_pair(y, "direction")?;
        if ((y[0] * y[0] + y[1] * y[1]).sqrt() - 1.0).abs() > 1e-9 {
            return Err(ThermoError::InvalidInput(format!("direction must have unit ℓ₂ norm, got {y:?}")));
        }
        let ts: Vec<f64> = (0..8).rev().map(|j| t_max / f64::from(1u32 << j)).collect();
        let trace: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| Ok((t, self.thermodynamic_entropy([t * y[0], t * y[1]])? / t)))
            .collect::<Result<_, ThermoError>>()?;
        let n = trace.len();
        let grow = trace[n - 1].1 - trace[n - 2].1;
        if grow > 0.05 {
            return Ok(RecessionEstimate {
                direction: y,
                value: f64::INFINITY,
                status: LimitStatus::Unbounded,
                trace,
            });
        }
        let rows: Vec<Vec<f64>> = trace
            .iter()
            .map(|&(t, _)| {
                let x = t_max / t;
                vec![1.0, x * t.ln() / t_max.ln().max(1.0), x]
            })
            .collect();
        let vs: Vec<f64> = trace.iter().map(|p| p.1).collect();
        let value = fit::least_squares(&rows, &vs).map_or(vs[n - 1], |c| c[0]);
        Ok(RecessionEstimate {
            direction: y,
            value,
            status: LimitStatus::Converged,
            trace,
        })
    }

    /// Samples `resolution` normal directions on the ℓ₁ sphere; flags
    /// condensation when some boundary point has a finite density.
    pub fn phase_diagram(&self, resolution: usize) -> Result<PhaseDiagram, ThermoError> {
        use rayon::prelude::*;
        if resolution < 8 {
            return Err(ThermoError::InvalidInput(format!("phase diagram needs at least 8 directions, got {resolution}")));
        }
        let k_max = match self.rate.box_extent() {
            Some(_) => self.opts.series.k_max,
            None => self.opts.boundary_k_max.max(1 << 14),
        };
        let samples: Vec<PhaseSample> = (0..resolution)
            .into_par_iter()
            .map(|j| {
                let s = j as f64 / (resolution - 1) as f64;
                let y = [s, 1.0 - s];
                let directional = self.directional_at(y, k_max)?;
                let boundary = self.boundary_point(s);
                let critical_density = match boundary {
                    Some(p) => match self.grand_canonical(p) {
                        Ok(gc) if gc.density_error_bound.is_finite() => gc.density,
                        Ok(_) | Err(ThermoError::Divergent { .. }) | Err(ThermoError::BoxExhausted { .. }) => {
                            [f64::INFINITY; 2]
                        }
                        Err(e) => return Err(e),
                    },
                    None => [f64::INFINITY; 2],
                };
                Ok(PhaseSample {
                    direction: y,
                    directional_fugacity: directional,
                    boundary_fugacity: boundary.unwrap_or([f64::INFINITY; 2]),
                    critical_density,
                })
            })
            .collect::<Result<_, ThermoError>>()?;
        let condensing = samples
            .iter()
            .any(|p| p.critical_density.iter().all(|v| v.is_finite()));
        Ok(PhaseDiagram {
            rate: self.rate.describe(),
            samples,
            condensing,
        })
    }

    /// Directional fugacity; the axes use the one-species calculator.
    fn directional_at(&self, y: [f64; 2], k_max: u32) -> Result<f64, ThermoError> {
        for i in 0..2 {
            if y[i] == 1.0 {
                let c = self.axes[i].critical().phi_c;
                if !c.is_nan() {
                    return Ok(c);
                }
            }
        }
        Ok(self.directional_critical_fugacity(y, k_max)?.value)
    }

    /// One-site marginal at fugacity `φ`, truncated once the enumerated mass
    /// reaches `1 − tail_tol`. The tolerance is floored at ten times the
    /// series tolerance, below which `Z` itself is not resolved.
    pub fn site_marginal(&self, phi: [f64; 2], tail_tol: f64) -> Result<SiteMarginal, ThermoError> {
        check_pair(phi, "fugacity")?;
        let tail_tol = tail_tol.max(10.0 * self.opts.series.rel_tol);
        let log_z = self.log_z(phi)?;
        let ln_phi = [phi[0].ln(), phi[1].ln()];
        let mut states = vec![[0, 0]];
        let mut probs = vec![(-log_z).exp()];
        let mut mass = probs[0];
        let mut prev: Vec<f64> = vec![0.0];
        let mut cur: Vec<f64> = Vec::new();
        let cap = match self.rate.box_extent() {
            Some(extent) => extent,
            None => self.opts.series.k_max,
        };
        let mut m = 0u32;
        while 1.0 - mass > tail_tol {
            m += 1;
            if m > cap {
                return Err(match self.rate.box_extent() {
                    Some(extent) => ThermoError::BoxExhausted { extent },
                    None => ThermoError::NonConvergence {
                        what: format!("site marginal at {phi:?}"),
                        residual: 1.0 - mass,
                    },
                });
            }
            if phi == [0.0, 0.0] {
                break;
            }
            let lo = if phi[1] == 0.0 { m } else { 0 };
            let hi = if phi[0] == 0.0 { 0 } else { m };
            cur.clear();
            cur.resize(m as usize + 1, f64::NAN);
            for k1 in lo..=hi {
                let k2 = m - k1;
                let lf = if k2 >= 1 {
                    prev[k1 as usize] + self.rate.eval([k1, k2])?[1].ln()
                } else {
                    prev[k1 as usize - 1] + self.rate.eval([k1, 0])?[0].ln()
                };
                cur[k1 as usize] = lf;
                let a = if k1 == 0 { 0.0 } else { f64::from(k1) * ln_phi[0] };
                let b = if k2 == 0 { 0.0 } else { f64::from(k2) * ln_phi[1] };
                let p = (a + b - lf - log_z).exp();
                if p > 0.0 {
                    states.push([k1, k2]);
                    probs.push(p);
                    mass += p;
                }
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        Ok(SiteMarginal {
            fugacity: phi,
            states,
            probs,
            tail: (1.0 - mass).max(0.0),
        })
    }
}

fn relabel_axis(e: ThermoError, species: usize) -> ThermoError {
    match e {
        ThermoError::Supercritical { density, critical } => {
            let mut d = [0.0; 2];
            d[species] = density[0];
            ThermoError::Supercritical { density: d, critical }
        }
        e => e,
    }
}

fn entropy_at(rho: [f64; 2], phi: [f64; 2], log_z: f64) -> Result<f64, ThermoError> {
    let s = dot_log(rho, phi) - log_z;
    if s.is_nan() {
        return Err(ThermoError::NonFinite(format!("entropy at {rho:?}")));
    }
    Ok(s)
}

/// `⟨a, log b⟩` with `0·log 0 = 0`.
fn dot_log(a: [f64; 2], b: [f64; 2]) -> f64 {
    (0..2).map(|i| if a[i] == 0.0 { 0.0 } else { a[i] * b[i].ln() }).sum()
}

fn quasi_potential_from(phi: [f64; 2], jac: [[f64; 2]; 2], bar: [f64; 2], rho: [f64; 2], lambda: [f64; 2]) -> [f64; 2] {
    let d = [lambda[0] - rho[0], lambda[1] - rho[1]];
    [
        bar[0] - phi[0] - (jac[0][0] * d[0] + jac[0][1] * d[1]),
        bar[1] - phi[1] - (jac[1][0] * d[0] + jac[1][1] * d[1]),
    ]
}

fn solve2(a: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det.abs() > 0.0) || !det.is_finite() {
        return None;
    }
    Some([(b[0] * a[1][1] - a[0][1] * b[1]) / det, (a[0][0] * b[1] - a[1][0] * b[0]) / det])
}

/// At most `n` distinct integers spread evenly over `lo..=hi`.
fn sample_indices(lo: u32, hi: u32, n: u32) -> Vec<u32> {
    let span = hi - lo;
    let n = n.min(span + 1).max(1);
    let mut out: Vec<u32> = (0..n)
        .map(|j| lo + (u64::from(span) * u64::from(j) / u64::from((n - 1).max(1))) as u32)
        .collect();
    out.dedup();
    out
}
