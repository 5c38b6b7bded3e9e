//! Thermodynamics of a single-species rate `ĝ`: `Ẑ`, `R̂`, `Φ̂`, `φ̂_c`, `ρ̂_c`.

use std::sync::OnceLock;

use crate::rates::{ClosedForm, OneSpeciesRate};

use super::fit::log_corrected_limit;
use super::series::{self, SeriesOptions, SeriesSummary};
use super::ThermoError;

/// Critical quantities of a one-species rate. `NaN` marks a quantity that
/// could not be determined (a tabulated axis running out of its box).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatCritical {
    /// `φ̂_c`, `∞` for non-condensing unbounded rates.
    pub phi_c: f64,
    /// `ρ̂_c = R̂(φ̂_c)`, `∞` when the density diverges at `φ̂_c`.
    pub rho_c: f64,
    /// `log Ẑ(φ̂_c)`, `∞` when `Ẑ` diverges at `φ̂_c`.
    pub log_z_c: f64,
    summary: Option<SeriesSummary>,
}

impl HatCritical {
    pub fn mu_c(&self) -> f64 {
        self.phi_c.ln()
    }

    pub fn is_condensing(&self) -> bool {
        self.rho_c.is_finite()
    }
}

/// One-species grand-canonical calculator with cached critical values.
#[derive(Debug)]
pub struct OneSpeciesThermo {
    base: OneSpeciesRate,
    opts: SeriesOptions,
    newton_tol: f64,
    critical: OnceLock<HatCritical>,
}

impl Clone for OneSpeciesThermo {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            opts: self.opts,
            newton_tol: self.newton_tol,
            critical: self.critical.clone(),
        }
    }
}

impl OneSpeciesThermo {
    pub fn new(base: OneSpeciesRate, opts: SeriesOptions, newton_tol: f64) -> Self {
        Self {
            base,
            opts,
            newton_tol,
            critical: OnceLock::new(),
        }
    }

    pub fn base(&self) -> &OneSpeciesRate {
        &self.base
    }

    /// `φ̂_c = lim ĝ!(k)^{1/k}`: closed form for built-in rates, extrapolated
    /// from `(1/k) log ĝ!(k)` otherwise.
    fn critical_fugacity(&self) -> f64 {
        match self.base.tag() {
            ClosedForm::Linear => f64::INFINITY,
            ClosedForm::Constant | ClosedForm::Evans { .. } => 1.0,
            ClosedForm::Custom => {
                let k_max = self.opts.k_max;
                let mut acc = 0.0;
                let mut ms = Vec::new();
                let mut vs = Vec::new();
                let mut last_k = 0u32;
                let mut trace = Vec::with_capacity(k_max as usize + 1);
                trace.push(0.0);
                for k in 1..=k_max {
                    let g = self.base.eval(k);
                    if !(g > 0.0 && g.is_finite()) {
                        break;
                    }
                    acc += g.ln();
                    trace.push(acc / f64::from(k));
                    last_k = k;
                }
                if last_k < 16 {
                    return f64::NAN;
                }
                let half = trace[(last_k / 2) as usize];
                if trace[last_k as usize] - half > 0.1 {
                    return f64::INFINITY;
                }
                let lo = (last_k / 8).max(1);
                let n_pts = 200u32.min(last_k - lo + 1);
                for j in 0..n_pts {
                    let m = lo + ((last_k - lo) as u64 * u64::from(j) / u64::from((n_pts - 1).max(1))) as u32;
                    ms.push(f64::from(m));
                    vs.push(trace[m as usize]);
                }
                log_corrected_limit(&ms, &vs).unwrap_or(trace[last_k as usize]).exp()
            }
        }
    }

    pub fn critical(&self) -> &HatCritical {
        self.critical.get_or_init(|| {
            let phi_c = self.critical_fugacity();
            if !phi_c.is_finite() {
                return HatCritical {
                    phi_c,
                    rho_c: if phi_c.is_nan() { f64::NAN } else { f64::INFINITY },
                    log_z_c: if phi_c.is_nan() { f64::NAN } else { f64::INFINITY },
                    summary: None,
                };
            }
            let opts = SeriesOptions {
                rel_tol: 1e-18,
                ..self.opts
            };
            match series::one_species(&self.base, phi_c, &opts) {
                Ok(s) => HatCritical {
                    phi_c,
                    rho_c: if s.density_error_bound.is_finite() { s.mean[0] } else { f64::INFINITY },
                    log_z_c: s.log_z,
                    summary: Some(s),
                },
                Err(ThermoError::Divergent { .. }) => HatCritical {
                    phi_c,
                    rho_c: f64::INFINITY,
                    log_z_c: f64::INFINITY,
                    summary: None,
                },
                Err(_) => HatCritical {
                    phi_c,
                    rho_c: f64::NAN,
                    log_z_c: f64::NAN,
                    summary: None,
                },
            }
        })
    }

    /// Series summary of `Ẑ` at `s`; the critical point uses the cached sweep.
    pub fn summary(&self, s: f64) -> Result<SeriesSummary, ThermoError> {
        let crit = self.critical();
        if crit.phi_c.is_finite() {
            if s > crit.phi_c * (1.0 + 1e-12) {
                return Err(ThermoError::Divergent { shell: 0 });
            }
            if s >= crit.phi_c * (1.0 - 1e-12) {
                return crit.summary.ok_or(ThermoError::Divergent { shell: 0 });
            }
        }
        series::one_species(&self.base, s, &self.opts)
    }

    pub fn log_z(&self, s: f64) -> Result<f64, ThermoError> {
        Ok(self.summary(s)?.log_z)
    }

    /// `R̂(s)`.
    pub fn density(&self, s: f64) -> Result<f64, ThermoError> {
        Ok(self.summary(s)?.mean[0])
    }

    /// `Φ̂(r)` for sub-critical `r`, by safeguarded Newton in `log s`
    /// (`dR̂/d log s = Var`).
    pub fn inverse(&self, r: f64) -> Result<f64, ThermoError> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(ThermoError::InvalidInput(format!("density must be finite and non-negative, got {r}")));
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        let crit = *self.critical();
        if crit.rho_c.is_finite() {
            if r > crit.rho_c {
                return Err(ThermoError::Supercritical {
                    density: [r, 0.0],
                    critical: crit.rho_c,
                });
            }
            if r == crit.rho_c {
                return Ok(crit.phi_c);
            }
        }
        let mut lo = f64::NEG_INFINITY;
        let mut hi = if crit.phi_c.is_finite() { crit.phi_c.ln() } else { f64::INFINITY };
        let mut u = if crit.phi_c.is_finite() { r.ln().min(hi - 0.5) } else { r.ln() };
        let mut best = (f64::INFINITY, u);
        for _ in 0..200 {
            let (value, var) = match self.summary(u.exp()) {
                Ok(s) => (s.mean[0], s.second[0] - s.mean[0] * s.mean[0]),
                Err(ThermoError::Divergent { .. }) => {
                    hi = hi.min(u);
                    u = bisect(lo, hi, u);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let resid = value - r;
            if resid.abs() < best.0 {
                best = (resid.abs(), u);
            }
            if resid.abs() <= self.newton_tol * r {
                // one polishing step
                if var > 0.0 {
                    let v = u - resid / var;
                    if let Ok(s) = self.summary(v.exp()) {
                        if (s.mean[0] - r).abs() <= resid.abs() {
                            return Ok(v.exp());
                        }
                    }
                }
                return Ok(u.exp());
            }
            if resid > 0.0 {
                hi = hi.min(u);
            } else {
                lo = lo.max(u);
            }
            let step = if var > 0.0 { -resid / var } else { f64::NAN };
            let next = u + step.clamp(-5.0, 5.0);
            u = if next.is_finite() && next > lo && next < hi { next } else { bisect(lo, hi, u) };
        }
        Err(ThermoError::NonConvergence {
            what: format!("one-species inversion of density {r}"),
            residual: best.0,
        })
    }

    /// `Φ̂(r ∧ ρ̂_c)`.
    pub fn extended_inverse(&self, r: f64) -> Result<f64, ThermoError> {
        let crit = self.critical();
        if crit.rho_c.is_finite() && r >= crit.rho_c {
            return Ok(crit.phi_c);
        }
        self.inverse(r)
    }

    /// `Ŝ(r) = r log Φ̂(r ∧ ρ̂_c) − log Ẑ(Φ̂(r ∧ ρ̂_c))`.
    pub fn entropy(&self, r: f64) -> Result<f64, ThermoError> {
        if r == 0.0 {
            return Ok(0.0);
        }
        let phi = self.extended_inverse(r)?;
        Ok(r * phi.ln() - self.log_z(phi)?)
    }
}

fn bisect(lo: f64, hi: f64, u: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo.max(u) + 2.0,
        (false, true) => hi.min(u) - 2.0,
        (false, false) => u,
    }
}
