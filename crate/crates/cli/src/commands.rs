//! The six experiment commands. Each computes in parallel and writes its
//! files from the calling thread.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};

use zrp_core::ensembles::{
    canonical_on, entropy_production_trace, equivalence_of_ensembles_trace, master_equation_evolve,
    slowly_varying_product, DistributionTable, Generator, StateSpace, TimeScale,
};
use zrp_core::lattice::{LatticeConfiguration, Torus};
use zrp_core::pde::{self, PdeField};
use zrp_core::profile::{Profile, ProfileTerm, WaveVector};
use zrp_core::rates::RateSpec;
use zrp_core::simulate;
use zrp_core::thermo::{Thermo, ThermoError};
use zrp_core::verify::{hydrodynamic_sweep, SweepSettings};

use crate::config::{ExperimentConfig, InitialState, MasterInitial, PdeScheme};
use crate::failure::Failure;

/// Points of the profile validation grid.
const VALIDATION_POINTS: usize = 1024;
/// Slack on entropy monotonicity along the semigroup.
const ENTROPY_SLACK: f64 = 1e-10;

/// What a command produced. `abort` is set when outputs were written but
/// the run hit a numerical stop (frozen lattice, criticality).
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<String>,
    pub summary: Value,
    pub abort: Option<Failure>,
}

impl Outcome {
    fn file(&mut self, out: &Path, name: &str) -> std::path::PathBuf {
        self.outputs.push(name.to_string());
        out.join(name)
    }
}

fn num(v: f64) -> String {
    format!("{v:.12e}")
}

fn thermo_for(spec: &RateSpec) -> Result<Thermo, Failure> {
    Ok(Thermo::new(spec.build()?))
}

fn require_seed(cfg: &ExperimentConfig, what: &str) -> Result<u64, Failure> {
    cfg.seed
        .ok_or_else(|| Failure::usage(format!("{what} needs an explicit seed (--seed or \"seed\")")))
}

fn require_grid(name: &str, grid: &[f64]) -> Result<(), Failure> {
    if grid.is_empty() {
        return Err(Failure::usage(format!("empty t-grid: `{name}` needs at least one time")));
    }
    if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Failure::usage(format!(
            "`{name}` must be finite, non-negative and strictly increasing: {grid:?}"
        )));
    }
    Ok(())
}

/// The profile must be non-negative and strictly sub-critical on a grid of
/// at least 1024 points.
pub fn validate_profile(thermo: &Thermo, profile: &Profile, d: u32) -> Result<(), Failure> {
    if d == 0 {
        return Err(Failure::usage("dimension must be at least 1"));
    }
    let mut m = (VALIDATION_POINTS as f64).powf(1.0 / f64::from(d)).round() as usize;
    while m.pow(d) < VALIDATION_POINTS {
        m += 1;
    }
    let values = profile.grid_values(m, d);
    let torus_point = |x: usize| {
        let mut r = x;
        let mut u = vec![0.0; d as usize];
        for j in (0..d as usize).rev() {
            u[j] = (r % m) as f64 / m as f64;
            r /= m;
        }
        u
    };
    let mut seen = HashSet::new();
    for (x, rho) in values.iter().enumerate() {
        if !seen.insert([rho[0].to_bits(), rho[1].to_bits()]) {
            continue;
        }
        let bad = |why: &str| Failure::usage(format!("profile value {rho:?} at u = {:?} {why}", torus_point(x)));
        if !(rho[0].is_finite() && rho[1].is_finite() && rho[0] >= 0.0 && rho[1] >= 0.0) {
            return Err(bad("is not a non-negative density"));
        }
        match thermo.is_subcritical(*rho) {
            Some(true) => {}
            Some(false) => return Err(bad("is not sub-critical")),
            None => match thermo.mean_jump_rate(*rho) {
                Ok(_) => {}
                Err(ThermoError::Supercritical { .. }) | Err(ThermoError::NonConvergence { .. }) => {
                    return Err(bad("is not sub-critical"))
                }
                Err(e) => return Err(e.into()),
            },
        }
    }
    Ok(())
}

pub fn phase_diagram(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, Failure> {
    let block = cfg.phase_diagram.clone().unwrap_or_default();
    let thermo = thermo_for(&cfg.rate)?;
    let diagram = thermo.phase_diagram(block.resolution)?;
    let mut outcome = Outcome::default();
    diagram.write_csv(&outcome.file(out, "phase_diagram.csv"))?;
    let hat = thermo.hat_critical().map(|c| {
        json!({
            "phi_c": c.phi_c,
            "rho_c": c.rho_c,
            "log_z_c": c.log_z_c,
        })
    });
    outcome.summary = json!({
        "rate": diagram.rate,
        "condensing": diagram.condensing,
        "directions": diagram.samples.len(),
        "one_species_critical": hat,
    });
    std::fs::write(
        outcome.file(out, "summary.json"),
        serde_json::to_string_pretty(&outcome.summary)?,
    )?;
    Ok(outcome)
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, Failure> {
    let block = cfg.simulate.as_ref().expect("resolved config has a simulate block");
    require_grid("t_macro", &block.t_macro)?;
    if block.replicas == 0 {
        return Err(Failure::usage("replicas must be at least 1"));
    }
    let seed = require_seed(cfg, "simulate")?;
    let torus = Torus::new(block.n, block.d)?;
    let rate = cfg.rate.build()?;
    let records = match &block.initial {
        InitialState::Product { profile, tail_tol } => {
            let thermo = Thermo::new(rate.clone());
            validate_profile(&thermo, profile, block.d)?;
            let product = slowly_varying_product(&thermo, |u| profile.eval(u), torus, *tail_tol)?;
            simulate::run(&rate, |s, r| product.sample(s, r), &block.t_macro, seed, block.replicas)?
        }
        InitialState::Fixed { occupations } => {
            let start = LatticeConfiguration::from_occupations(torus, occupations.clone())?;
            simulate::run(&rate, |_, _| start.clone(), &block.t_macro, seed, block.replicas)?
        }
    };

    let mut outcome = Outcome::default();
    let files = block.write_first.unwrap_or(block.replicas).min(block.replicas);
    for rec in records.iter().take(files as usize) {
        let r = rec.replica;
        simulate::write_snapshots_csv(rec, &outcome.file(out, &format!("snapshots_{r:05}.csv")))?;
        if let Some(ell) = block.ell {
            simulate::write_fields_csv(rec, ell, &outcome.file(out, &format!("fields_{r:05}.csv")))?;
        }
        if block.binary {
            let last = &rec.snapshots.last().expect("non-empty grid").config;
            simulate::write_binary(last, seed, &outcome.file(out, &format!("final_{r:05}.bin")))?;
        }
    }

    let frozen = records.iter().filter(|r| r.frozen).count();
    let events: u64 = records.iter().map(|r| r.events).sum();
    let drift = records.iter().map(|r| r.max_intensity_drift).fold(0.0, f64::max);
    let mut summary = json!({
        "replicas": block.replicas,
        "files_written_for": files,
        "events": events,
        "frozen_replicas": frozen,
        "max_intensity_drift": drift,
    });

    if block.compare_master {
        let InitialState::Fixed { occupations } = &block.initial else {
            return Err(Failure::usage("compare_master needs a fixed initial configuration"));
        };
        let totals = records[0].snapshots[0].config.totals();
        let k = [totals[0] as u32, totals[1] as u32];
        let space = Arc::new(StateSpace::new(torus, k)?);
        let t_last = *block.t_macro.last().expect("non-empty grid");
        let mu0 = DistributionTable::point_mass(space.clone(), space.rank(occupations));
        let law = master_equation_evolve(&rate, &mu0, t_last, TimeScale::Diffusive)?;
        let mut counts = vec![0u64; space.len()];
        for rec in &records {
            let last = &rec.snapshots.last().expect("non-empty grid").config;
            counts[space.rank(last.occupations())] += 1;
        }
        let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / block.replicas as f64).collect();
        let tv = 0.5
            * empirical
                .iter()
                .zip(law.probabilities())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        let mut w = csv::Writer::from_path(outcome.file(out, "master_comparison.csv"))?;
        w.write_record(["state", "empirical", "master"])?;
        for (i, (e, m)) in empirical.iter().zip(law.probabilities()).enumerate() {
            w.write_record(&[i.to_string(), num(*e), num(*m)])?;
        }
        w.flush()?;
        let report = json!({
            "t_macro": t_last,
            "states": space.len(),
            "replicas": block.replicas,
            "total_variation": tv,
        });
        std::fs::write(outcome.file(out, "tv_report.json"), serde_json::to_string_pretty(&report)?)?;
        summary["master_comparison"] = report;
    }

    outcome.summary = summary;
    if frozen > 0 {
        outcome.abort = Some(Failure::numerical(format!(
            "{frozen} of {} replicas froze before the last snapshot",
            block.replicas
        )));
    }
    Ok(outcome)
}

/// Heat-equation solution for a profile in the cosine/sine grammar.
fn fourier_solution(profile: &Profile, t: f64) -> Profile {
    let decay = |term: &ProfileTerm| {
        let k2: f64 = match &term.k {
            WaveVector::Axis(k) => f64::from(*k).powi(2),
            WaveVector::Full(ks) => ks.iter().map(|k| f64::from(*k).powi(2)).sum(),
        };
        let f = (-4.0 * PI * PI * k2 * t).exp();
        ProfileTerm {
            a: term.a,
            b: term.b * f,
            c: term.c * f,
            k: term.k.clone(),
        }
    };
    Profile {
        rho1: profile.rho1.iter().map(decay).collect(),
        rho2: profile.rho2.iter().map(decay).collect(),
    }
}

fn linf_against(frame: &PdeField, exact: &Profile) -> f64 {
    let reference = exact.grid_values(frame.m, frame.d);
    reference
        .iter()
        .enumerate()
        .map(|(x, r)| (frame.rho[0][x] - r[0]).abs().max((frame.rho[1][x] - r[1]).abs()))
        .fold(0.0, f64::max)
}

pub fn solve_pde(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, Failure> {
    let block = cfg.solve_pde.as_ref().expect("resolved config has a solve_pde block");
    require_grid("times", &block.times)?;
    let thermo = thermo_for(&cfg.rate)?;
    validate_profile(&thermo, &block.profile, block.d)?;
    let grid = block.profile.grid_values(block.m, block.d);
    let rho0 = [grid.iter().map(|v| v[0]).collect(), grid.iter().map(|v| v[1]).collect()];
    let mut outcome = Outcome::default();
    let (run, sum) = match block.scheme {
        PdeScheme::System => (pde::solve_system(&thermo, rho0, block.m, block.d, &block.times, block.safety)?, None),
        PdeScheme::Decoupled => {
            let hat = thermo
                .hat()
                .ok_or_else(|| Failure::usage("the decoupled scheme needs a species-blind rate"))?;
            let dec = pde::solve_species_blind_decoupled(hat, rho0, block.m, block.d, &block.times, block.safety)?;
            (dec.system, Some(dec.sum))
        }
    };
    pde::write_frames_csv(&run.frames, &outcome.file(out, "frames.csv"))?;
    if let Some(sum) = &sum {
        let mut w = csv::Writer::from_path(outcome.file(out, "sum.csv"))?;
        w.write_record(["t", "x", "r"])?;
        for f in sum {
            for (x, r) in f.r.iter().enumerate() {
                w.write_record(&[f.t.to_string(), x.to_string(), r.to_string()])?;
            }
        }
        w.flush()?;
    }
    let mut summary = json!({
        "scheme": run.scheme,
        "steps": run.steps,
        "dt_min": run.dt_min,
        "dt_max": run.dt_max,
        "mass_drift": run.mass_drift,
        "invariant_region": run.report,
    });
    if cfg.rate == RateSpec::Linear {
        let err = run
            .frames
            .iter()
            .map(|f| linf_against(f, &fourier_solution(&block.profile, f.t)))
            .fold(0.0, f64::max);
        summary["fourier_linf_error"] = json!(err);
    }
    outcome.summary = summary;
    Ok(outcome)
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, Failure> {
    let block = cfg.sweep.as_ref().expect("resolved config has a sweep block");
    require_grid("t_macro", &block.t_macro)?;
    if block.n_list.is_empty() || block.replicas == 0 {
        return Err(Failure::usage("sweep needs a non-empty n_list and at least one replica"));
    }
    let seed = require_seed(cfg, "sweep")?;
    let thermo = thermo_for(&cfg.rate)?;
    validate_profile(&thermo, &block.profile, block.d)?;
    let settings = SweepSettings {
        n_list: block.n_list.clone(),
        d: block.d,
        t_macro: block.t_macro.clone(),
        ell: block.ell,
        replicas: block.replicas,
        seed,
        pde_m: block.pde_m,
        safety: block.safety,
        tail_tol: block.tail_tol,
    };
    let result = hydrodynamic_sweep(&thermo, &block.profile, &settings)?;
    let mut outcome = Outcome::default();
    result.write_csv(&outcome.file(out, "sweep.csv"))?;
    let finals = result.final_errors();
    outcome.summary = json!({
        "final_errors": finals,
        "strictly_decreasing": finals.windows(2).all(|w| w[1] < w[0]),
        "fitted_rate": result.fitted_rate,
        "fit_residual": result.fit_residual,
        "pde_breach": result.pde_breach,
        "frozen_replicas": result.frozen_replicas,
    });
    if result.pde_breach {
        outcome.abort = Some(Failure::numerical("the PDE solution left the sub-critical region"));
    } else if result.frozen_replicas > 0 {
        outcome.abort = Some(Failure::numerical(format!(
            "{} replicas froze before the last snapshot",
            result.frozen_replicas
        )));
    }
    Ok(outcome)
}

pub fn equivalence(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, Failure> {
    let block = cfg.equivalence.as_ref().expect("resolved config has an equivalence block");
    if block.n_list.is_empty() {
        return Err(Failure::usage("n_list must not be empty"));
    }
    let thermo = thermo_for(&cfg.rate)?;
    let trace = equivalence_of_ensembles_trace(&thermo, block.rho, &block.n_list, block.d)?;
    let mut outcome = Outcome::default();
    let mut w = csv::Writer::from_path(outcome.file(out, "equivalence.csv"))?;
    w.write_record(["N", "K1", "K2", "states", "entropy", "normalized"])?;
    for p in &trace {
        w.write_record(&[
            p.n.to_string(),
            p.k[0].to_string(),
            p.k[1].to_string(),
            p.states.to_string(),
            num(p.entropy),
            num(p.normalized),
        ])?;
    }
    w.flush()?;
    outcome.summary = json!({
        "normalized": trace.iter().map(|p| p.normalized).collect::<Vec<_>>(),
        "strictly_decreasing": trace.windows(2).all(|w| w[1].normalized < w[0].normalized),
    });
    Ok(outcome)
}

pub fn master(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, Failure> {
    let block = cfg.master.as_ref().expect("resolved config has a master block");
    require_grid("t_grid", &block.t_grid)?;
    let rate = cfg.rate.build()?;
    let space = Arc::new(StateSpace::new(Torus::new(block.n, block.d)?, block.k)?);
    let nu = canonical_on(&rate, space.clone())?;
    let generator = Generator::new(&rate, space.clone())?;
    let laws: Vec<DistributionTable> = match &block.initial {
        MasterInitial::Fixed { occupations } => {
            let eta = LatticeConfiguration::from_occupations(*space.torus(), occupations.clone())?;
            if eta.totals() != [u64::from(block.k[0]), u64::from(block.k[1])] {
                return Err(Failure::usage(format!(
                    "initial configuration carries {:?} particles, k is {:?}",
                    eta.totals(),
                    block.k
                )));
            }
            vec![DistributionTable::point_mass(space.clone(), space.rank(occupations))]
        }
        MasterInitial::Random { laws } => {
            if *laws == 0 {
                return Err(Failure::usage("random initial needs at least one law"));
            }
            let seed = require_seed(cfg, "a random initial law")?;
            (0..u64::from(*laws))
                .map(|j| DistributionTable::random(space.clone(), seed, j))
                .collect()
        }
    };
    let traces = laws
        .iter()
        .map(|mu0| entropy_production_trace(&generator, mu0, &nu, &block.t_grid, block.scale))
        .collect::<Result<Vec<_>, _>>()?;
    let mut outcome = Outcome::default();
    let mut w = csv::Writer::from_path(outcome.file(out, "entropy.csv"))?;
    w.write_record(["law", "t", "relative_entropy"])?;
    for (j, trace) in traces.iter().enumerate() {
        for (t, h) in trace {
            w.write_record(&[j.to_string(), t.to_string(), num(*h)])?;
        }
    }
    w.flush()?;
    let t_last = *block.t_grid.last().expect("non-empty grid");
    let final_law = generator.evolve(&laws[0], t_last, block.scale)?;
    std::fs::write(outcome.file(out, "final_law.json"), final_law.to_json()?)?;
    let monotone = traces
        .iter()
        .all(|tr| tr.windows(2).all(|w| w[1].1 <= w[0].1 + ENTROPY_SLACK));
    outcome.summary = json!({
        "states": space.len(),
        "max_exit_rate": generator.max_exit_rate(),
        "laws": traces.len(),
        "final_entropy": traces.iter().map(|tr| tr.last().map(|p| p.1)).collect::<Vec<_>>(),
        "entropy_non_increasing": monotone,
    });
    Ok(outcome)
}
