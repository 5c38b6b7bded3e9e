//! Continuous-time kinetic Monte Carlo for the two-species ZRP on `T_N^d`
//! with symmetric nearest-neighbour jumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{LatticeConfiguration, LatticeError, Torus};
use crate::rates::{JumpRate, RateError};
use crate::rng::{substream, Purpose};

/// Events between intensity and conservation audits.
pub const AUDIT_INTERVAL: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no particle can move (total intensity {intensity})")]
    Frozen { intensity: f64 },
    #[error("particle totals changed from {expected:?} to {found:?}")]
    Conservation { expected: [u64; 2], found: [u64; 2] },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("snapshot format: {0}")]
    Format(String),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Binary indexed tree of non-negative weights.
#[derive(Debug, Clone)]
struct Fenwick {
    tree: Vec<f64>,
    top: usize,
}

impl Fenwick {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(weights);
        for i in 1..=n {
            let j = i + (i & i.wrapping_neg());
            if j <= n {
                tree[j] += tree[i];
            }
        }
        let top = if n == 0 { 0 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) };
        Self { tree, top }
    }

    fn add(&mut self, i: usize, delta: f64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut s = 0.0;
        let mut j = self.tree.len() - 1;
        while j > 0 {
            s += self.tree[j];
            j &= j - 1;
        }
        s
    }

    /// Smallest `i` whose prefix sum through `i` exceeds `u`.
    fn find(&self, mut u: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0usize;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= u {
                pos = next;
                u -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n.saturating_sub(1))
    }
}

/// A single trajectory: configuration, per-site rates and the event clock
/// in microscopic time.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    rate: &'a JumpRate,
    config: LatticeConfiguration,
    site_rates: Vec<[f64; 2]>,
    tree: Fenwick,
    time: f64,
    events: u64,
    max_drift: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(rate: &'a JumpRate, config: LatticeConfiguration) -> Result<Self, SimError> {
        let site_rates = config.occupations().iter().map(|&k| rate.eval(k)).collect::<Result<Vec<_>, _>>()?;
        let totals: Vec<f64> = site_rates.iter().map(|g| g[0] + g[1]).collect();
        Ok(Self {
            rate,
            config,
            site_rates,
            tree: Fenwick::new(&totals),
            time: 0.0,
            events: 0,
            max_drift: 0.0,
        })
    }

    pub fn config(&self) -> &LatticeConfiguration {
        &self.config
    }

    pub fn into_config(self) -> LatticeConfiguration {
        self.config
    }

    /// Microscopic time elapsed.
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// Largest relative drift of the cached intensity seen at an audit.
    pub fn max_intensity_drift(&self) -> f64 {
        self.max_drift
    }

    pub fn total_intensity(&self) -> f64 {
        self.tree.total()
    }

    /// Waiting time to the next event, `Exp(Σ_x (g₁+g₂)(η(x)))`; does not move.
    pub fn waiting_time(&self, rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        let intensity = self.total_intensity();
        if !(intensity > 0.0) || self.config.torus().side() == 1 {
            return Err(SimError::Frozen { intensity });
        }
        let u: f64 = rng.gen();
        Ok(-(1.0 - u).ln() / intensity)
    }

    /// Applies one jump: site by intensity, species by split, target uniform
    /// over the `2d` neighbours.
    pub fn jump(&mut self, rng: &mut ChaCha8Rng) -> Result<(), SimError> {
        let torus = *self.config.torus();
        let total = self.total_intensity();
        let mut x = self.tree.find(rng.gen::<f64>() * total);
        // roundoff can land on an empty site; fall back to a linear scan
        if self.site_rates[x][0] + self.site_rates[x][1] <= 0.0 {
            x = self
                .site_rates
                .iter()
                .position(|g| g[0] + g[1] > 0.0)
                .ok_or(SimError::Frozen { intensity: total })?;
        }
        let g = self.site_rates[x];
        let species = if rng.gen::<f64>() * (g[0] + g[1]) < g[0] { 0 } else { 1 };
        let y = torus.neighbour(x, rng.gen_range(0..2 * torus.dim() as usize));
        self.events += 1;
        if y != x {
            self.config.move_particle(species, x, y);
            self.refresh(x)?;
            self.refresh(y)?;
        }
        if self.events % AUDIT_INTERVAL == 0 {
            self.audit()?;
        }
        Ok(())
    }

    /// One event: returns the waiting time and applies the move.
    pub fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<f64, SimError> {
        let tau = self.waiting_time(rng)?;
        self.time += tau;
        self.jump(rng)?;
        Ok(tau)
    }

    fn refresh(&mut self, x: usize) -> Result<(), SimError> {
        let g = self.rate.eval(self.config.get(x))?;
        let old = self.site_rates[x];
        self.site_rates[x] = g;
        self.tree.add(x, (g[0] + g[1]) - (old[0] + old[1]));
        Ok(())
    }

    /// Checks conservation and rebuilds the intensity tree from fresh rates.
    pub fn audit(&mut self) -> Result<f64, SimError> {
        let found = self.config.recount();
        if found != self.config.totals() {
            return Err(SimError::Conservation {
                expected: self.config.totals(),
                found,
            });
        }
        let fresh = self
            .config
            .occupations()
            .iter()
            .map(|&k| self.rate.eval(k))
            .collect::<Result<Vec<_>, _>>()?;
        let totals: Vec<f64> = fresh.iter().map(|g| g[0] + g[1]).collect();
        let exact: f64 = totals.iter().sum();
        let cached = self.tree.total();
        let drift = if exact > 0.0 { (cached - exact).abs() / exact } else { cached.abs() };
        self.max_drift = self.max_drift.max(drift);
        self.site_rates = fresh;
        self.tree = Fenwick::new(&totals);
        Ok(drift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub t_macro: f64,
    pub t_micro: f64,
    pub config: LatticeConfiguration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub replica: u64,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    pub events: u64,
    /// The lattice stopped moving before the last snapshot time.
    pub frozen: bool,
    pub max_intensity_drift: f64,
}

/// Runs one replica; the snapshot at macroscopic time `t` is the state at
/// microscopic time `t N²` (the last event at or before it).
pub fn run_replica(
    rate: &JumpRate,
    initial: LatticeConfiguration,
    grid: &[f64],
    seed: u64,
    replica: u64,
) -> Result<TrajectoryRecord, SimError> {
    check_grid(grid)?;
    let n = f64::from(initial.torus().side());
    let totals = initial.totals();
    let mut sim = Simulator::new(rate, initial)?;
    let mut rng = substream(seed, replica, Purpose::Dynamics, 0);
    let mut snapshots = Vec::with_capacity(grid.len());
    let mut frozen = false;
    // next event time, drawn ahead so the state at each target is exact
    let mut next = match sim.waiting_time(&mut rng) {
        Ok(tau) => tau,
        Err(SimError::Frozen { .. }) => {
            frozen = true;
            f64::INFINITY
        }
        Err(e) => return Err(e),
    };
    for &t_macro in grid {
        let target = t_macro * n * n;
        while next <= target {
            sim.time = next;
            sim.jump(&mut rng)?;
            match sim.waiting_time(&mut rng) {
                Ok(tau) => next = sim.time + tau,
                Err(SimError::Frozen { .. }) => {
                    frozen = true;
                    next = f64::INFINITY;
                }
                Err(e) => return Err(e),
            }
        }
        snapshots.push(Snapshot {
            t_macro,
            t_micro: target,
            config: sim.config().clone(),
        });
    }
    sim.audit()?;
    if sim.config().totals() != totals {
        return Err(SimError::Conservation {
            expected: totals,
            found: sim.config().totals(),
        });
    }
    Ok(TrajectoryRecord {
        replica,
        seed,
        snapshots,
        events: sim.events(),
        frozen,
        max_intensity_drift: sim.max_intensity_drift(),
    })
}

/// Runs `replicas` independent trajectories in parallel; replica `r` draws
/// its initial state from `initial(seed, r)`.
pub fn run<F>(rate: &JumpRate, initial: F, grid: &[f64], seed: u64, replicas: u64) -> Result<Vec<TrajectoryRecord>, SimError>
where
    F: Fn(u64, u64) -> LatticeConfiguration + Sync,
{
    check_grid(grid)?;
    (0..replicas)
        .into_par_iter()
        .map(|r| run_replica(rate, initial(seed, r), grid, seed, r))
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<(), SimError> {
    if grid.is_empty() {
        return Err(SimError::InvalidInput("empty snapshot grid".into()));
    }
    if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SimError::InvalidInput(format!(
            "snapshot times must be finite, non-negative and strictly increasing: {grid:?}"
        )));
    }
    Ok(())
}

/// Writes `t_macro,x,eta1,eta2` rows for every snapshot.
pub fn write_snapshots_csv(record: &TrajectoryRecord, path: &Path) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_macro", "x", "eta1", "eta2"])?;
    for s in &record.snapshots {
        for (x, k) in s.config.occupations().iter().enumerate() {
            w.write_record(&[s.t_macro.to_string(), x.to_string(), k[0].to_string(), k[1].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `t_macro,ell,x,rho1,rho2` rows of block-averaged fields.
pub fn write_fields_csv(record: &TrajectoryRecord, ell: u32, path: &Path) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_macro", "ell", "x", "rho1", "rho2"])?;
    for s in &record.snapshots {
        let f = s.config.empirical_density_field(ell)?;
        for x in 0..f[0].len() {
            w.write_record(&[
                s.t_macro.to_string(),
                ell.to_string(),
                x.to_string(),
                f[0][x].to_string(),
                f[1][x].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Little-endian `d:u32, N:u32, K1:u64, K2:u64, seed:u64`, then one
/// `(η₁, η₂)` pair of `u32` per site in row-major order.
pub fn write_binary(config: &LatticeConfiguration, seed: u64, path: &Path) -> Result<(), SimError> {
    let mut w = BufWriter::new(File::create(path)?);
    let t = config.torus();
    let k = config.totals();
    w.write_all(&t.dim().to_le_bytes())?;
    w.write_all(&t.side().to_le_bytes())?;
    w.write_all(&k[0].to_le_bytes())?;
    w.write_all(&k[1].to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    for c in config.occupations() {
        w.write_all(&c[0].to_le_bytes())?;
        w.write_all(&c[1].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads [`write_binary`] output; returns the configuration and seed.
pub fn read_binary(path: &Path) -> Result<(LatticeConfiguration, u64), SimError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 32 {
        return Err(SimError::Format("truncated header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let torus = Torus::new(u32_at(4), u32_at(0))?;
    let k = [u64_at(8), u64_at(16)];
    let seed = u64_at(24);
    if bytes.len() != 32 + 8 * torus.sites() {
        return Err(SimError::Format(format!(
            "expected {} bytes for {} sites, found {}",
            32 + 8 * torus.sites(),
            torus.sites(),
            bytes.len()
        )));
    }
    let eta = (0..torus.sites()).map(|x| [u32_at(32 + 8 * x), u32_at(36 + 8 * x)]).collect();
    let config = LatticeConfiguration::from_occupations(torus, eta)?;
    if config.totals() != k {
        return Err(SimError::Format(format!("header totals {k:?} disagree with body {:?}", config.totals())));
    }
    Ok((config, seed))
}
