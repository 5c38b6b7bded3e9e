//! `zrp`: configuration-driven experiments for the two-species zero range
//! process. Exit codes: 0 success, 1 numerical abort, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

mod commands;
mod config;
mod failure;

use config::{ExperimentConfig, Overrides};
use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "zrp", version, about = "Two-species zero range process experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in configuration; a --config file overrides its top-level keys.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Output directory (default: out/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Critical boundary of the fugacity domain.
    PhaseDiagram,
    /// Kinetic Monte Carlo trajectories.
    Simulate,
    /// Finite-difference solution of the hydrodynamic equation.
    SolvePde,
    /// Particle system against the PDE over several lattice sizes.
    Sweep,
    /// Canonical against grand-canonical relative entropy per site.
    Equivalence,
    /// Exact master equation and relative entropy decay.
    Master,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PhaseDiagram => "phase-diagram",
            Command::Simulate => "simulate",
            Command::SolvePde => "solve-pde",
            Command::Sweep => "sweep",
            Command::Equivalence => "equivalence",
            Command::Master => "master",
        }
    }
}

fn write_manifest(
    out: &Path,
    command: Command,
    config: Option<&ExperimentConfig>,
    outcome: &commands::Outcome,
    failure: Option<&Failure>,
) -> std::io::Result<()> {
    let code = failure.map_or(0, |f| f.kind.exit_code());
    let manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "status": if failure.is_some() { "aborted" } else { "ok" },
        "exit_code": code,
        "abort_reason": failure.map(|f| f.message.clone()),
        "outputs": outcome.outputs,
        "summary": outcome.summary,
    });
    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest values serialize");
    std::fs::write(out.join("manifest.json"), text + "\n")
}

fn execute(cli: &Cli) -> ExitCode {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        threads: cli.threads,
    };
    let cfg = match config::resolve(cli.command, cli.config.as_deref(), cli.preset.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(f) => {
            eprintln!("zrp {}: {f}", cli.command.name());
            if let Some(out) = &cli.out {
                let _ = write_manifest(out, cli.command, None, &commands::Outcome::default(), Some(&f));
            }
            return ExitCode::from(f.kind.exit_code());
        }
    };
    let out = cfg.out.clone().expect("resolve materializes the output directory");
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("zrp {}: cannot create {}: {e}", cli.command.name(), out.display());
        return ExitCode::from(2);
    }
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("zrp: thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::PhaseDiagram => commands::phase_diagram(&cfg, &out),
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::SolvePde => commands::solve_pde(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
        Command::Equivalence => commands::equivalence(&cfg, &out),
        Command::Master => commands::master(&cfg, &out),
    };
    let (outcome, failure) = match result {
        Ok(mut o) => {
            let abort = o.abort.take();
            (o, abort)
        }
        Err(f) => (
            commands::Outcome {
                summary: Value::Null,
                ..Default::default()
            },
            Some(f),
        ),
    };
    if let Err(e) = write_manifest(&out, cli.command, Some(&cfg), &outcome, failure.as_ref()) {
        eprintln!("zrp {}: cannot write manifest: {e}", cli.command.name());
        return ExitCode::from(1);
    }
    match failure {
        Some(f) => {
            eprintln!("zrp {}: {f}", cli.command.name());
            ExitCode::from(f.kind.exit_code())
        }
        None => {
            println!("{}", serde_json::to_string(&outcome.summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
    }
}

fn main() -> ExitCode {
    execute(&Cli::parse())
}
