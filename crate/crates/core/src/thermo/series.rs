//! Shell-by-shell summation of the partition-function power series.
//!
//! Terms are grouped by `|k|₁ = m`. Each shell is reduced relative to its
//! own largest term and merged into a running log-scaled accumulator, so
//! `Z` may exceed the `f64` range without overflow.

use crate::rates::{JumpRate, OneSpeciesRate, RateError};

use super::ThermoError;

/// Series truncation controls.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeriesOptions {
    /// Stop once `(1+m)·shell_m < rel_tol · Σ (1+m')·shell_m'` holds for
    /// `STOP_STREAK` consecutive shells.
    pub rel_tol: f64,
    /// Hard shell cap for one-dimensional series.
    pub k_max: u32,
    /// Hard shell cap for the two-dimensional double series.
    pub k_max_double: u32,
    /// Consecutive non-decreasing shell ratios ≥ 1 that signal divergence.
    pub probation: u32,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-13,
            k_max: 100_000,
            k_max_double: 4_000,
            probation: 64,
        }
    }
}

const STOP_STREAK: u32 = 3;
const MIN_SHELLS: u32 = 8;

/// Moments of one shell, scaled by `exp(-log_max)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShellStats {
    pub log_max: f64,
    pub s0: f64,
    pub s1: [f64; 2],
    /// `Σ k1², Σ k1 k2, Σ k2²`.
    pub s2: [f64; 3],
}

/// Result of a (possibly truncated) series summation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesSummary {
    pub log_z: f64,
    /// `E[k_i]` under the normalized weights.
    pub mean: [f64; 2],
    /// `E[k1²], E[k1 k2], E[k2²]`.
    pub second: [f64; 3],
    /// Last shell included.
    pub shells: u32,
    /// Relative tail bound on `Z`.
    pub z_error_bound: f64,
    /// Relative tail bound on the first moments (`∞` when they diverge).
    pub density_error_bound: f64,
    /// True when the stopping rule fired before the hard cap.
    pub converged: bool,
    /// Estimated polynomial decay exponent of the shells at the cap.
    pub tail_exponent: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Accumulator {
    scale: f64,
    s0: f64,
    s1: [f64; 2],
    s2: [f64; 3],
}

impl Accumulator {
    fn new() -> Self {
        Self {
            scale: f64::NEG_INFINITY,
            s0: 0.0,
            s1: [0.0; 2],
            s2: [0.0; 3],
        }
    }

    fn merge(&mut self, shell: &ShellStats) {
        if shell.log_max > self.scale {
            let f = (self.scale - shell.log_max).exp();
            self.s0 *= f;
            self.s1.iter_mut().for_each(|v| *v *= f);
            self.s2.iter_mut().for_each(|v| *v *= f);
            self.scale = shell.log_max;
        }
        let f = (shell.log_max - self.scale).exp();
        self.s0 += f * shell.s0;
        for i in 0..2 {
            self.s1[i] += f * shell.s1[i];
        }
        for i in 0..3 {
            self.s2[i] += f * shell.s2[i];
        }
    }

    fn log_total(&self) -> f64 {
        self.scale + self.s0.ln()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Drives a shell generator until the stopping rule, the cap or divergence.
pub(crate) fn drive<F>(mut next_shell: F, cap: u32, opts: &SeriesOptions) -> Result<SeriesSummary, ThermoError>
where
    F: FnMut(u32) -> Result<Option<ShellStats>, ThermoError>,
{
    let mut acc = Accumulator::new();
    let mut log_weighted_total = f64::NEG_INFINITY;
    let mut history: Vec<f64> = Vec::new();
    let mut streak = 0u32;
    let mut rising = 0u32;
    let mut prev_ratio = f64::NEG_INFINITY;
    let ln_tol = opts.rel_tol.ln();
    let mut m = 0u32;
    let converged = loop {
        let shell = next_shell(m)?;
        let log_shell = match &shell {
            Some(s) => {
                if !(s.log_max.is_finite() || s.log_max == f64::NEG_INFINITY) || !s.s0.is_finite() {
                    return Err(ThermoError::NonFinite(format!("shell {m} of the partition series")));
                }
                acc.merge(s);
                s.log_max + s.s0.ln()
            }
            None => f64::NEG_INFINITY,
        };
        history.push(log_shell);
        let weighted = log_shell + f64::from(m).ln_1p();
        log_weighted_total = log_add(log_weighted_total, weighted);

        if m >= 1 {
            let ratio = log_shell - history[m as usize - 1];
            if ratio.is_finite() && ratio >= 0.0 && ratio >= prev_ratio - 1e-12 {
                rising += 1;
                if rising >= opts.probation {
                    return Err(ThermoError::Divergent { shell: m });
                }
            } else {
                rising = 0;
            }
            prev_ratio = ratio;
        }

        if weighted < ln_tol + log_weighted_total {
            streak += 1;
        } else {
            streak = 0;
        }
        if streak >= STOP_STREAK && m >= MIN_SHELLS {
            break true;
        }
        if m >= cap {
            break false;
        }
        m += 1;
    };

    let log_z = acc.log_total();
    let mean = [acc.s1[0] / acc.s0, acc.s1[1] / acc.s0];
    let second = [acc.s2[0] / acc.s0, acc.s2[1] / acc.s0, acc.s2[2] / acc.s0];
    let last = *history.last().expect("at least one shell");
    let mf = f64::from(m.max(1));

    let mut tail_exponent = None;
    let (z_bound, density_bound) = if last == f64::NEG_INFINITY {
        (0.0, 0.0)
    } else {
        let ratio = (last - history[m.saturating_sub(1) as usize]).exp();
        if ratio < 0.999 {
            let zb = (last - log_z).exp() * ratio / (1.0 - ratio);
            let r1 = ratio * (mf + 2.0) / (mf + 1.0);
            let db = if r1 < 1.0 {
                (last - log_z).exp() * (mf + 1.0) * r1 / (1.0 - r1)
            } else {
                f64::INFINITY
            };
            (zb, db)
        } else {
            let half = history[(m / 2) as usize];
            let p = if half.is_finite() { -(last - half) / std::f64::consts::LN_2 } else { f64::INFINITY };
            tail_exponent = Some(p);
            if p <= 1.02 {
                return Err(ThermoError::Divergent { shell: m });
            }
            let zb = (last - log_z).exp() * mf / (p - 1.0);
            let db = if p > 2.02 { (last - log_z).exp() * mf * mf / (p - 2.0) } else { f64::INFINITY };
            (zb, db)
        }
    };

    Ok(SeriesSummary {
        log_z,
        mean,
        second,
        shells: m,
        z_error_bound: z_bound,
        density_error_bound: density_bound,
        converged,
        tail_exponent,
    })
}

/// One-dimensional series `Σ s^m / ĝ!(m)`.
pub(crate) fn one_species(base: &OneSpeciesRate, s: f64, opts: &SeriesOptions) -> Result<SeriesSummary, ThermoError> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(ThermoError::InvalidInput(format!("fugacity must be finite and non-negative, got {s}")));
    }
    let ln_s = s.ln();
    let mut log_fact = 0.0;
    drive(
        |m| {
            if m == 0 {
                return Ok(Some(ShellStats {
                    log_max: 0.0,
                    s0: 1.0,
                    s1: [0.0; 2],
                    s2: [0.0; 3],
                }));
            }
            if s == 0.0 {
                return Ok(None);
            }
            let g = base.eval(m);
            if !(g > 0.0 && g.is_finite()) {
                return Err(ThermoError::Rate(RateError::Degenerate {
                    species: 1,
                    k1: m,
                    k2: 0,
                    value: g,
                }));
            }
            log_fact += g.ln();
            let mf = f64::from(m);
            Ok(Some(ShellStats {
                log_max: mf * ln_s - log_fact,
                s0: 1.0,
                s1: [mf, 0.0],
                s2: [mf * mf, 0.0, 0.0],
            }))
        },
        opts.k_max,
        opts,
    )
}

/// Two-dimensional series `Σ_k φ^k / g!(k)`, with `log g!` built by the
/// shell recurrence `g!(k1, k2) = g!(k1, k2-1) g2(k1, k2)`.
pub(crate) fn double(rate: &JumpRate, phi: [f64; 2], opts: &SeriesOptions) -> Result<SeriesSummary, ThermoError> {
    if phi.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(ThermoError::InvalidInput(format!(
            "fugacity must be finite and non-negative, got {phi:?}"
        )));
    }
    let ln_phi = [phi[0].ln(), phi[1].ln()];
    let mut prev: Vec<f64> = vec![0.0];
    let mut cur: Vec<f64> = Vec::new();
    let cap = opts.k_max_double;
    drive(
        |m| {
            if m == 0 {
                return Ok(Some(ShellStats {
                    log_max: 0.0,
                    s0: 1.0,
                    s1: [0.0; 2],
                    s2: [0.0; 3],
                }));
            }
            if phi[0] == 0.0 && phi[1] == 0.0 {
                return Ok(None);
            }
            let lo = if phi[1] == 0.0 { m } else { 0 };
            let hi = if phi[0] == 0.0 { 0 } else { m };
            cur.clear();
            cur.resize(m as usize + 1, f64::NAN);
            let mut log_max = f64::NEG_INFINITY;
            for k1 in lo..=hi {
                let k2 = m - k1;
                let lf = if k2 >= 1 {
                    let g = rate.eval([k1, k2])?[1];
                    prev[k1 as usize] + checked_ln(g, 2, [k1, k2])?
                } else {
                    let g = rate.eval([k1, 0])?[0];
                    prev[k1 as usize - 1] + checked_ln(g, 1, [k1, 0])?
                };
                cur[k1 as usize] = lf;
                let lt = term_log(k1, k2, ln_phi) - lf;
                log_max = log_max.max(lt);
            }
            let mut stats = ShellStats {
                log_max,
                s0: 0.0,
                s1: [0.0; 2],
                s2: [0.0; 3],
            };
            for k1 in lo..=hi {
                let k2 = m - k1;
                let w = (term_log(k1, k2, ln_phi) - cur[k1 as usize] - log_max).exp();
                let (a, b) = (f64::from(k1), f64::from(k2));
                stats.s0 += w;
                stats.s1[0] += a * w;
                stats.s1[1] += b * w;
                stats.s2[0] += a * a * w;
                stats.s2[1] += a * b * w;
                stats.s2[2] += b * b * w;
            }
            std::mem::swap(&mut prev, &mut cur);
            Ok(Some(stats))
        },
        cap,
        opts,
    )
}

#[inline]
fn term_log(k1: u32, k2: u32, ln_phi: [f64; 2]) -> f64 {
    let a = if k1 == 0 { 0.0 } else { f64::from(k1) * ln_phi[0] };
    let b = if k2 == 0 { 0.0 } else { f64::from(k2) * ln_phi[1] };
    a + b
}

#[inline]
fn checked_ln(g: f64, species: usize, k: [u32; 2]) -> Result<f64, ThermoError> {
    if g > 0.0 && g.is_finite() {
        Ok(g.ln())
    } else {
        Err(ThermoError::Rate(RateError::Degenerate {
            species,
            k1: k[0],
            k2: k[1],
            value: g,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{species_blind_rate, OneSpeciesRate};
    use approx::assert_relative_eq;

    #[test]
    fn exponential_series() {
        let s = one_species(&OneSpeciesRate::linear(), 0.5, &SeriesOptions::default()).unwrap();
        assert_relative_eq!(s.log_z, 0.5, epsilon = 1e-14);
        assert_relative_eq!(s.mean[0], 0.5, epsilon = 1e-13);
        assert!(s.converged);
    }

    #[test]
    fn huge_partition_function_does_not_overflow() {
        let rate = species_blind_rate(OneSpeciesRate::linear());
        let s = double(&rate, [600.0, 400.0], &SeriesOptions::default()).unwrap();
        assert_relative_eq!(s.log_z, 1000.0, max_relative = 1e-12);
        assert_relative_eq!(s.mean[0], 600.0, max_relative = 1e-10);
    }

    #[test]
    fn geometric_divergence_detected() {
        let err = one_species(&OneSpeciesRate::constant(), 1.01, &SeriesOptions::default()).unwrap_err();
        assert!(matches!(err, ThermoError::Divergent { .. }));
        let err = one_species(&OneSpeciesRate::constant(), 1.0, &SeriesOptions::default()).unwrap_err();
        assert!(matches!(err, ThermoError::Divergent { .. }));
    }

    #[test]
    fn polynomial_tail_reports_bounds() {
        let base = OneSpeciesRate::evans(4.0).unwrap();
        let s = one_species(&base, 1.0, &SeriesOptions::default()).unwrap();
        // Ẑ(1) = Σ 24/((k+1)(k+2)(k+3)(k+4)) = 4/3, R̂(1) = 1/(b-2) = 1/2
        assert_relative_eq!(s.log_z.exp(), 4.0 / 3.0, max_relative = 1e-9);
        assert!((s.mean[0] - 0.5).abs() < 1e-6);
        assert!(s.density_error_bound.is_finite());
    }

    #[test]
    fn one_zero_fugacity_reduces_to_axis() {
        let rate = species_blind_rate(OneSpeciesRate::evans(4.0).unwrap());
        let a = double(&rate, [0.5, 0.0], &SeriesOptions::default()).unwrap();
        let b = one_species(&OneSpeciesRate::evans(4.0).unwrap(), 0.5, &SeriesOptions::default()).unwrap();
        assert_relative_eq!(a.log_z, b.log_z, epsilon = 1e-13);
        assert_eq!(a.mean[1], 0.0);
    }
}
