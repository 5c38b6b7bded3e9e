//! Experiment configuration: one JSON document per run, optionally layered
//! over a named preset, with `--seed`, `--out` and `--threads` on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use zrp_core::ensembles::TimeScale;
use zrp_core::profile::Profile;
use zrp_core::rates::RateSpec;
use zrp_core::verify::EllRule;

use crate::failure::Failure;
use crate::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rate: RateSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_diagram: Option<PhaseDiagramBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_pde: Option<SolvePdeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master: Option<MasterBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDiagramBlock {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

impl Default for PhaseDiagramBlock {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub n: u32,
    #[serde(default = "one")]
    pub d: u32,
    pub t_macro: Vec<f64>,
    #[serde(default = "one_u64")]
    pub replicas: u64,
    pub initial: InitialState,
    /// Also write block-averaged fields with this radius.
    #[serde(default)]
    pub ell: Option<u32>,
    /// Write per-replica files only for the first this many replicas.
    #[serde(default)]
    pub write_first: Option<u64>,
    /// Final states in the binary snapshot format.
    #[serde(default)]
    pub binary: bool,
    /// Compare the empirical law at the last time with the master equation.
    #[serde(default)]
    pub compare_master: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Product measure with slowly varying parameter.
    Product {
        profile: Profile,
        #[serde(default = "default_tail_tol")]
        tail_tol: f64,
    },
    /// The same configuration for every replica, sites row-major.
    Fixed { occupations: Vec<[u32; 2]> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PdeScheme {
    #[default]
    System,
    /// Scalar sum first, then the linear transport of each species.
    Decoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolvePdeBlock {
    pub m: usize,
    #[serde(default = "one")]
    pub d: u32,
    pub times: Vec<f64>,
    pub profile: Profile,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default)]
    pub scheme: PdeScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub profile: Profile,
    pub n_list: Vec<u32>,
    #[serde(default = "one")]
    pub d: u32,
    pub t_macro: Vec<f64>,
    #[serde(default)]
    pub ell: EllRule,
    pub replicas: u64,
    #[serde(default = "default_pde_m")]
    pub pde_m: usize,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceBlock {
    pub rho: [f64; 2],
    pub n_list: Vec<u32>,
    #[serde(default = "one")]
    pub d: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterBlock {
    pub n: u32,
    #[serde(default = "one")]
    pub d: u32,
    pub k: [u32; 2],
    pub t_grid: Vec<f64>,
    #[serde(default = "default_scale")]
    pub scale: TimeScale,
    pub initial: MasterInitial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MasterInitial {
    /// Point mass on one configuration.
    Fixed { occupations: Vec<[u32; 2]> },
    /// Laws drawn uniformly from the simplex.
    Random { laws: u32 },
}

fn one() -> u32 {
    1
}

fn one_u64() -> u64 {
    1
}

fn default_resolution() -> usize {
    64
}

fn default_safety() -> f64 {
    0.4
}

fn default_pde_m() -> usize {
    256
}

fn default_tail_tol() -> f64 {
    1e-12
}

fn default_scale() -> TimeScale {
    TimeScale::Diffusive
}

/// Top-level values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub const PRESETS: &[(&str, Command)] = &[
    ("phase-evans4", Command::PhaseDiagram),
    ("three-site", Command::Simulate),
    ("heat", Command::SolvePde),
    ("blind-evans4", Command::SolvePde),
    ("hydro-linear", Command::Sweep),
    ("hydro-evans4", Command::Sweep),
    ("equivalence", Command::Equivalence),
    ("entropy", Command::Master),
];

pub fn preset(name: &str, command: Command) -> Result<Value, Failure> {
    let owner = PRESETS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c);
    match owner {
        None => {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            return Err(Failure::usage(format!("unknown preset {name:?}; known presets: {}", names.join(", "))));
        }
        Some(c) if c != command => {
            return Err(Failure::usage(format!("preset {name:?} belongs to `{}`, not `{}`", c.name(), command.name())));
        }
        Some(_) => {}
    }
    let cos = |a: f64, b: f64| json!([{ "a": a, "b": b, "k": 1 }]);
    let sin = |a: f64, c: f64| json!([{ "a": a, "c": c, "k": 1 }]);
    let flat = |a: f64| json!([{ "a": a }]);
    Ok(match name {
        "phase-evans4" => json!({
            "rate": { "family": "evans", "b": 4.0 },
            "phase_diagram": { "resolution": 64 }
        }),
        "three-site" => json!({
            "rate": { "family": "evans", "b": 4.0 },
            "seed": 2026,
            "simulate": {
                "n": 3,
                "t_macro": [5.0],
                "replicas": 10000,
                "initial": { "kind": "fixed", "occupations": [[2, 1], [0, 0], [0, 0]] },
                "write_first": 4,
                "compare_master": true
            }
        }),
        "heat" => json!({
            "rate": { "family": "linear" },
            "solve_pde": {
                "m": 128,
                "times": [0.1],
                "profile": { "rho1": cos(1.0, 0.5), "rho2": sin(0.5, 0.25) }
            }
        }),
        "blind-evans4" => json!({
            "rate": { "family": "evans", "b": 4.0 },
            "solve_pde": {
                "m": 128,
                "times": [0.05, 0.1, 0.2],
                "profile": { "rho1": cos(0.2, 0.1), "rho2": sin(0.15, 0.05) },
                "scheme": "decoupled"
            }
        }),
        "hydro-linear" => json!({
            "rate": { "family": "linear" },
            "seed": 2026,
            "sweep": {
                "profile": { "rho1": cos(0.5, 0.2), "rho2": flat(0.5) },
                "n_list": [64, 128, 256],
                "t_macro": [0.05],
                "replicas": 32
            }
        }),
        "hydro-evans4" => json!({
            "rate": { "family": "evans", "b": 4.0 },
            "seed": 2026,
            "sweep": {
                "profile": { "rho1": cos(0.2, 0.1), "rho2": sin(0.15, 0.05) },
                "n_list": [64, 128, 256],
                "t_macro": [0.05],
                "replicas": 32
            }
        }),
        "equivalence" => json!({
            "rate": { "family": "evans", "b": 4.0 },
            "equivalence": { "rho": [0.2, 0.2], "n_list": [2, 3, 4, 5, 6] }
        }),
        "entropy" => json!({
            "rate": { "family": "evans", "b": 4.0 },
            "seed": 2026,
            "master": {
                "n": 3,
                "k": [2, 1],
                "t_grid": [0.0, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.3],
                "initial": { "kind": "random", "laws": 20 }
            }
        }),
        _ => unreachable!("preset table and bodies agree"),
    })
}

/// Preset, then config file (top-level keys replace the preset's), then flags.
pub fn resolve(
    command: Command,
    config_path: Option<&Path>,
    preset_name: Option<&str>,
    overrides: &Overrides,
) -> Result<ExperimentConfig, Failure> {
    let mut doc = Map::new();
    if let Some(name) = preset_name {
        if let Value::Object(m) = preset(name, command)? {
            doc.extend(m);
        }
    }
    let mut base_dir = None;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(m) = value else {
            return Err(Failure::usage(format!("config {} must be a JSON object", path.display())));
        };
        doc.extend(m);
        base_dir = path.parent().map(Path::to_path_buf);
    }
    if doc.is_empty() {
        return Err(Failure::usage("no configuration: pass --config PATH or --preset NAME"));
    }
    if let Some(seed) = overrides.seed {
        doc.insert("seed".into(), json!(seed));
    }
    if let Some(out) = &overrides.out {
        doc.insert("out".into(), json!(out));
    }
    if let Some(threads) = overrides.threads {
        doc.insert("threads".into(), json!(threads));
    }
    let mut config: ExperimentConfig =
        serde_json::from_value(Value::Object(doc)).map_err(|e| Failure::usage(format!("invalid config: {e}")))?;
    if let (RateSpec::Table { path }, Some(dir)) = (&mut config.rate, base_dir) {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
    if config.threads == Some(0) {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    if command == Command::PhaseDiagram && config.phase_diagram.is_none() {
        config.phase_diagram = Some(PhaseDiagramBlock::default());
    }
    let present = match command {
        Command::PhaseDiagram => true,
        Command::Simulate => config.simulate.is_some(),
        Command::SolvePde => config.solve_pde.is_some(),
        Command::Sweep => config.sweep.is_some(),
        Command::Equivalence => config.equivalence.is_some(),
        Command::Master => config.master.is_some(),
    };
    if !present {
        return Err(Failure::usage(format!(
            "config has no `{}` block",
            command.name().replace('-', "_")
        )));
    }
    let out = config
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    config.out = Some(out);
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves_for_its_command() {
        for (name, command) in PRESETS {
            let cfg = resolve(*command, None, Some(name), &Overrides::default()).unwrap();
            assert!(cfg.out.is_some(), "{name}");
            let echoed = serde_json::to_value(&cfg).unwrap();
            let again: ExperimentConfig = serde_json::from_value(echoed).unwrap();
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn preset_for_another_command_is_rejected() {
        let err = resolve(Command::Sweep, None, Some("heat"), &Overrides::default()).unwrap_err();
        assert!(err.message.contains("solve-pde"));
    }

    #[test]
    fn flags_override_top_level_keys_and_defaults_materialize() {
        let o = Overrides {
            seed: Some(9),
            out: Some(PathBuf::from("elsewhere")),
            threads: Some(2),
        };
        let cfg = resolve(Command::Sweep, None, Some("hydro-linear"), &o).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.out.as_deref(), Some(Path::new("elsewhere")));
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.pde_m, 256);
        assert_eq!(sweep.ell, EllRule::Sqrt);
    }

    #[test]
    fn relative_table_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"rate": {"family": "table", "path": "g.csv"}}"#).unwrap();
        let cfg = resolve(Command::PhaseDiagram, Some(&path), None, &Overrides::default()).unwrap();
        assert_eq!(cfg.rate, RateSpec::Table { path: dir.path().join("g.csv") });
        assert_eq!(cfg.phase_diagram, Some(PhaseDiagramBlock { resolution: 64 }));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"rate": {"family": "linear"}, "sede": 3}"#).unwrap();
        let err = resolve(Command::PhaseDiagram, Some(&path), None, &Overrides::default()).unwrap_err();
        assert_eq!(err.kind.exit_code(), 2);
    }
}
