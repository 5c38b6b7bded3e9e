//! Two-species local jump rates.
//!
//! A jump rate `g = (g1, g2)` gives, for a site holding `k = (k1, k2)`
//! particles, the rate at which a particle of each species leaves the site.
//! Only rates satisfying the compatibility relation
//! `g1(k) g2(k - e1) = g1(k - e2) g2(k)` admit product invariant measures,
//! and for those the factorial `g!(k)` (product of rates along any
//! increasing lattice path from the origin to `k`) is well defined.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Occupation numbers `(k1, k2)` of a single site.
pub type Counts = [u32; 2];

/// Relative tolerance of the compatibility identity.
pub const COMPATIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RateError {
    #[error("occupation ({k1}, {k2}) lies outside the tabulated box of extent {extent}")]
    OutsideBox { k1: u32, k2: u32, extent: u32 },
    #[error("degenerate rate: g{species}({k1}, {k2}) = {value}")]
    Degenerate {
        species: usize,
        k1: u32,
        k2: u32,
        value: f64,
    },
    #[error("rate table not found: {}", .0.display())]
    TableNotFound(PathBuf),
    #[error("malformed rate table: {0}")]
    MalformedTable(String),
    #[error("rate table is missing entry ({0}, {1})")]
    MissingEntry(u32, u32),
    #[error("invalid rate parameter: {0}")]
    InvalidParameter(String),
}

/// Closed-form tag of a one-species rate `ĝ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClosedForm {
    /// `ĝ(k) = k` (independent walkers).
    Linear,
    /// `ĝ(k) = 1` for `k ≥ 1`.
    Constant,
    /// `ĝ(k) = 1 + b/k` for `k ≥ 1`.
    Evans { b: f64 },
    Custom,
}

type RateFn = Arc<dyn Fn(u32) -> f64 + Send + Sync>;

/// One-species jump rate `ĝ` with `ĝ(0) = 0` and `ĝ(k) > 0` for `k ≥ 1`.
#[derive(Clone)]
pub struct OneSpeciesRate {
    tag: ClosedForm,
    name: String,
    custom: Option<RateFn>,
    lipschitz: f64,
    bounded: bool,
}

impl fmt::Debug for OneSpeciesRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OneSpeciesRate")
            .field("tag", &self.tag)
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("bounded", &self.bounded)
            .finish()
    }
}

impl OneSpeciesRate {
    pub fn linear() -> Self {
        Self {
            tag: ClosedForm::Linear,
            name: "linear".into(),
            custom: None,
            lipschitz: 1.0,
            bounded: false,
        }
    }

    pub fn constant() -> Self {
        Self {
            tag: ClosedForm::Constant,
            name: "constant".into(),
            custom: None,
            lipschitz: 1.0,
            bounded: true,
        }
    }

    /// `ĝ(k) = 1 + b/k`; condensing for `b > 2` with critical density `1/(b-2)`.
    pub fn evans(b: f64) -> Result<Self, RateError> {
        if !(b.is_finite() && b >= 0.0) {
            return Err(RateError::InvalidParameter(format!(
                "evans parameter b must be finite and non-negative, got {b}"
            )));
        }
        Ok(Self {
            tag: ClosedForm::Evans { b },
            name: format!("evans(b={b})"),
            custom: None,
            lipschitz: 1.0 + b,
            bounded: true,
        })
    }

    /// Arbitrary rate given by a closure. `lipschitz` must bound
    /// `|ĝ(k+1) - ĝ(k)|` including the step from `ĝ(0) = 0`.
    pub fn custom<F>(name: &str, rate: F, lipschitz: f64, bounded: bool) -> Self
    where
        F: Fn(u32) -> f64 + Send + Sync + 'static,
    {
        Self {
            tag: ClosedForm::Custom,
            name: name.to_string(),
            custom: Some(Arc::new(rate)),
            lipschitz,
            bounded,
        }
    }

    pub fn tag(&self) -> ClosedForm {
        self.tag
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    #[inline]
    pub fn eval(&self, k: u32) -> f64 {
        if k == 0 {
            return 0.0;
        }
        match self.tag {
            ClosedForm::Linear => f64::from(k),
            ClosedForm::Constant => 1.0,
            ClosedForm::Evans { b } => 1.0 + b / f64::from(k),
            ClosedForm::Custom => (self.custom.as_ref().expect("custom rate closure"))(k),
        }
    }

    /// `h(k) = ĝ(k)/k`, the per-particle rate of the species-blind process.
    #[inline]
    pub fn per_particle(&self, k: u32) -> f64 {
        match self.tag {
            ClosedForm::Linear => 1.0,
            ClosedForm::Constant => 1.0 / f64::from(k),
            ClosedForm::Evans { b } => (1.0 + b / f64::from(k)) / f64::from(k),
            ClosedForm::Custom => self.eval(k) / f64::from(k),
        }
    }

    /// `log ĝ!(k) = Σ_{j≤k} log ĝ(j)`.
    pub fn log_factorial(&self, k: u32) -> f64 {
        let kf = f64::from(k);
        match self.tag {
            ClosedForm::Linear => ln_gamma(kf + 1.0),
            ClosedForm::Constant => 0.0,
            ClosedForm::Evans { b } => {
                if k == 0 {
                    0.0
                } else {
                    ln_gamma(kf + 1.0 + b) - ln_gamma(1.0 + b) - ln_gamma(kf + 1.0)
                }
            }
            ClosedForm::Custom => (1..=k).map(|j| self.eval(j).ln()).sum(),
        }
    }

    /// Successive `log ĝ!(k)` for `k = 0..=k_max`, accumulated term by term.
    pub fn log_factorials(&self, k_max: u32) -> Vec<f64> {
        let mut out = Vec::with_capacity(k_max as usize + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for k in 1..=k_max {
            acc += self.eval(k).ln();
            out.push(acc);
        }
        out
    }
}

/// Rates stored on the box `{0..=extent}²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    extent: u32,
    values: Vec<[f64; 2]>,
}

impl RateTable {
    pub fn from_fn<F>(extent: u32, mut f: F) -> Self
    where
        F: FnMut(Counts) -> [f64; 2],
    {
        let side = extent as usize + 1;
        let mut values = Vec::with_capacity(side * side);
        for k1 in 0..=extent {
            for k2 in 0..=extent {
                values.push(f([k1, k2]));
            }
        }
        Self { extent, values }
    }

    /// Tabulates another rate on `{0..=extent}²`.
    pub fn sample(rate: &JumpRate, extent: u32) -> Result<Self, RateError> {
        let mut err = None;
        let table = Self::from_fn(extent, |k| match rate.eval(k) {
            Ok(g) => g,
            Err(e) => {
                err.get_or_insert(e);
                [f64::NAN; 2]
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(table),
        }
    }

    /// Loads a CSV with header `k1,k2,g1,g2`. Every point of the box
    /// `{0..=max k}²` must be present.
    pub fn from_csv(path: &Path) -> Result<Self, RateError> {
        if !path.exists() {
            return Err(RateError::TableNotFound(path.to_path_buf()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| RateError::MalformedTable(e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| RateError::MalformedTable(e.to_string()))?
            .clone();
        let expected = ["k1", "k2", "g1", "g2"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(RateError::MalformedTable(format!(
                "expected header k1,k2,g1,g2, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries: HashMap<Counts, [f64; 2]> = HashMap::new();
        let mut extent = 0u32;
        for (line, record) in reader.deserialize::<(u32, u32, f64, f64)>().enumerate() {
            let (k1, k2, g1, g2) =
                record.map_err(|e| RateError::MalformedTable(format!("row {}: {e}", line + 2)))?;
            extent = extent.max(k1).max(k2);
            entries.insert([k1, k2], [g1, g2]);
        }
        if entries.is_empty() {
            return Err(RateError::MalformedTable("table has no rows".into()));
        }
        let side = extent as usize + 1;
        let mut values = Vec::with_capacity(side * side);
        for k1 in 0..=extent {
            for k2 in 0..=extent {
                values.push(*entries.get(&[k1, k2]).ok_or(RateError::MissingEntry(k1, k2))?);
            }
        }
        Ok(Self { extent, values })
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k1", "k2", "g1", "g2"])?;
        for k1 in 0..=self.extent {
            for k2 in 0..=self.extent {
                let g = self.values[self.index([k1, k2])];
                w.write_record(&[
                    k1.to_string(),
                    k2.to_string(),
                    format!("{:e}", g[0]),
                    format!("{:e}", g[1]),
                ])?;
            }
        }
        w.flush()
    }

    pub fn extent(&self) -> u32 {
        self.extent
    }

    #[inline]
    fn index(&self, k: Counts) -> usize {
        k[0] as usize * (self.extent as usize + 1) + k[1] as usize
    }

    pub fn get(&self, k: Counts) -> Option<[f64; 2]> {
        (k[0] <= self.extent && k[1] <= self.extent).then(|| self.values[self.index(k)])
    }

    /// Overwrites one entry (used to build defective tables).
    pub fn set(&mut self, k: Counts, g: [f64; 2]) {
        let i = self.index(k);
        self.values[i] = g;
    }
}

#[derive(Debug, Clone)]
pub enum RateFamily {
    /// `g_i(k) = k_i h(|k|₁)` with `h(m) = ĝ(m)/m`.
    SpeciesBlind(OneSpeciesRate),
    Tabulated(RateTable),
}

/// An immutable two-species local jump rate with its metadata.
#[derive(Debug, Clone)]
pub struct JumpRate {
    family: RateFamily,
    lipschitz: f64,
    bounded: bool,
}

impl JumpRate {
    pub fn family(&self) -> &RateFamily {
        &self.family
    }

    /// `g*`, the bound in `|g(k)|₁ ≤ g* |k|₁`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    /// The one-species rate this rate is the species-blind lift of, if any.
    pub fn blind_base(&self) -> Option<&OneSpeciesRate> {
        match &self.family {
            RateFamily::SpeciesBlind(base) => Some(base),
            RateFamily::Tabulated(_) => None,
        }
    }

    /// Largest occupation per species that can be evaluated, if limited.
    pub fn box_extent(&self) -> Option<u32> {
        match &self.family {
            RateFamily::SpeciesBlind(_) => None,
            RateFamily::Tabulated(t) => Some(t.extent()),
        }
    }

    pub fn describe(&self) -> String {
        match &self.family {
            RateFamily::SpeciesBlind(base) => format!("species_blind({})", base.name()),
            RateFamily::Tabulated(t) => format!("tabulated(extent={})", t.extent()),
        }
    }

    /// `(g1(k), g2(k))`.
    #[inline]
    pub fn eval(&self, k: Counts) -> Result<[f64; 2], RateError> {
        match &self.family {
            RateFamily::SpeciesBlind(base) => {
                let m = k[0] + k[1];
                if m == 0 {
                    return Ok([0.0, 0.0]);
                }
                let h = base.per_particle(m);
                Ok([f64::from(k[0]) * h, f64::from(k[1]) * h])
            }
            RateFamily::Tabulated(t) => t.get(k).ok_or(RateError::OutsideBox {
                k1: k[0],
                k2: k[1],
                extent: t.extent(),
            }),
        }
    }

    /// `log g!(k)`; closed form `log k1! + log k2! + log h!(|k|₁)` for
    /// species-blind rates, path product otherwise.
    pub fn log_factorial(&self, k: Counts) -> Result<f64, RateError> {
        match &self.family {
            RateFamily::SpeciesBlind(base) => {
                let m = k[0] + k[1];
                Ok(ln_gamma(f64::from(k[0]) + 1.0) + ln_gamma(f64::from(k[1]) + 1.0)
                    + base.log_factorial(m)
                    - ln_gamma(f64::from(m) + 1.0))
            }
            RateFamily::Tabulated(_) => g_factorial(self, k),
        }
    }

    /// The one-species rate `k ↦ g_i(k e_i)` seen by species `i` alone.
    pub fn axis_rate(&self, species: usize) -> OneSpeciesRate {
        match &self.family {
            RateFamily::SpeciesBlind(base) => base.clone(),
            RateFamily::Tabulated(t) => {
                let t = t.clone();
                let lip = self.lipschitz;
                OneSpeciesRate::custom(
                    &format!("axis{}(tabulated)", species + 1),
                    move |k| {
                        let mut c = [0, 0];
                        c[species] = k;
                        t.get(c).map_or(f64::NAN, |g| g[species])
                    },
                    lip,
                    true,
                )
            }
        }
    }
}

/// Lifts a one-species rate to the species-blind two-species rate.
pub fn species_blind_rate(base: OneSpeciesRate) -> JumpRate {
    let lipschitz = base.lipschitz_bound();
    let bounded = base.is_bounded();
    JumpRate {
        family: RateFamily::SpeciesBlind(base),
        lipschitz,
        bounded,
    }
}

/// Wraps a table; checks non-degeneracy on the whole box and derives `g*`.
pub fn tabulated_rate(table: RateTable) -> Result<JumpRate, RateError> {
    let n = table.extent();
    let mut lipschitz: f64 = 0.0;
    for k1 in 0..=n {
        for k2 in 0..=n {
            let g = table.get([k1, k2]).expect("inside box");
            for (i, &gi) in g.iter().enumerate() {
                let ki = [k1, k2][i];
                let ok = gi.is_finite() && gi >= 0.0 && ((gi == 0.0) == (ki == 0));
                if !ok {
                    return Err(RateError::Degenerate {
                        species: i + 1,
                        k1,
                        k2,
                        value: gi,
                    });
                }
            }
            if k1 < n {
                let up = table.get([k1 + 1, k2]).expect("inside box");
                lipschitz = lipschitz.max((up[0] - g[0]).abs());
            }
            if k2 < n {
                let up = table.get([k1, k2 + 1]).expect("inside box");
                lipschitz = lipschitz.max((up[1] - g[1]).abs());
            }
        }
    }
    Ok(JumpRate {
        family: RateFamily::Tabulated(table),
        lipschitz,
        bounded: true,
    })
}

/// Serializable rate description used by configuration files and manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RateSpec {
    Linear,
    Constant,
    Evans { b: f64 },
    Table { path: PathBuf },
}

impl RateSpec {
    pub fn build(&self) -> Result<JumpRate, RateError> {
        Ok(match self {
            RateSpec::Linear => species_blind_rate(OneSpeciesRate::linear()),
            RateSpec::Constant => species_blind_rate(OneSpeciesRate::constant()),
            RateSpec::Evans { b } => species_blind_rate(OneSpeciesRate::evans(*b)?),
            RateSpec::Table { path } => tabulated_rate(RateTable::from_csv(path)?)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompatibilityReport {
    pub holds: bool,
    /// Largest absolute residual `|g1(k)g2(k-e1) - g1(k-e2)g2(k)|`.
    pub worst_violation: f64,
    pub worst_at: Counts,
}

/// Checks the compatibility identity on `{1..=box_extent}²`.
pub fn check_compatibility(rate: &JumpRate, box_extent: u32) -> Result<CompatibilityReport, RateError> {
    if box_extent < 2 {
        return Err(RateError::InvalidParameter(format!(
            "compatibility box extent must be at least 2, got {box_extent}"
        )));
    }
    let mut report = CompatibilityReport {
        holds: true,
        worst_violation: 0.0,
        worst_at: [0, 0],
    };
    for k1 in 1..=box_extent {
        for k2 in 1..=box_extent {
            let g = rate.eval([k1, k2])?;
            let lhs = g[0] * rate.eval([k1 - 1, k2])?[1];
            let rhs = rate.eval([k1, k2 - 1])?[0] * g[1];
            let residual = (lhs - rhs).abs();
            if residual > COMPATIBILITY_TOL * lhs.abs().max(rhs.abs()) {
                report.holds = false;
            }
            if residual > report.worst_violation {
                report.worst_violation = residual;
                report.worst_at = [k1, k2];
            }
        }
    }
    Ok(report)
}

fn log_path_product(rate: &JumpRate, k: Counts, first: usize) -> Result<f64, RateError> {
    let second = 1 - first;
    let mut acc = 0.0;
    let mut pos = [0u32; 2];
    for (species, steps) in [(first, k[first]), (second, k[second])] {
        for _ in 0..steps {
            pos[species] += 1;
            let g = rate.eval(pos)?[species];
            if !(g > 0.0 && g.is_finite()) {
                return Err(RateError::Degenerate {
                    species: species + 1,
                    k1: pos[0],
                    k2: pos[1],
                    value: g,
                });
            }
            acc += g.ln();
        }
    }
    Ok(acc)
}

/// `log g!(k)` along the path taking all `e1` steps first.
pub fn g_factorial(rate: &JumpRate, k: Counts) -> Result<f64, RateError> {
    log_path_product(rate, k, 0)
}

/// Relative discrepancy between the two axis-aligned extremal paths to `k`.
pub fn path_independence_probe(rate: &JumpRate, k: Counts) -> Result<f64, RateError> {
    if k[0] == 0 || k[1] == 0 {
        log_path_product(rate, k, 0)?;
        return Ok(0.0);
    }
    let a = log_path_product(rate, k, 0)?;
    let b = log_path_product(rate, k, 1)?;
    Ok(((a - b).exp() - 1.0).abs())
}

/// Worst ratio `|g(k)|₁ / (g* |k|₁)` on `{0..=box_extent}²` (at most 1 when
/// the Lipschitz bound holds).
pub fn lipschitz_ratio(rate: &JumpRate, box_extent: u32) -> Result<f64, RateError> {
    let mut worst: f64 = 0.0;
    for k1 in 0..=box_extent {
        for k2 in 0..=box_extent {
            if k1 + k2 == 0 {
                continue;
            }
            let g = rate.eval([k1, k2])?;
            let ratio = (g[0] + g[1]) / (rate.lipschitz_bound() * f64::from(k1 + k2));
            worst = worst.max(ratio);
        }
    }
    Ok(worst)
}
