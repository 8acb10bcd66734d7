//! `stabmpc` — command-line harness around the stabilized centroidal MPC
//! simulator.
//!
//! Subcommands:
//! * `run <config.toml>` — execute one scenario and emit its artifacts.
//! * `batch <path>...` — execute many scenarios (files or directories of
//!   `*.toml`) and fold them into an aggregate.
//! * `preset [name]` — run a built-in scenario; with no name, list them.
//!
//! Exit codes: 0 = scenario ran and met its thresholds (or the listing /
//! empty batch succeeded), 1 = scenario ran but failed or the simulation
//! errored, 2 = the configuration was invalid.

mod batch;
mod config;
mod output;
mod presets;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{ConfigFile, StabilityChoice};

/// Environment variable consulted for the default output directory.
const OUT_DIR_ENV: &str = "STABMPC_OUT_DIR";
const OUT_DIR_DEFAULT: &str = "stabmpc-out";

#[derive(Parser)]
#[command(
    name = "stabmpc",
    about = "Stabilized centroidal MPC simulator for legged floating-mass models",
    version
)]
struct Cli {
    /// Output directory (default: $STABMPC_OUT_DIR, else ./stabmpc-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the scenario RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the stability-constraint mode.
    #[arg(long, value_enum, global = true)]
    stability: Option<StabilityChoice>,

    /// Override whether stability rows bind only at the first predicted step.
    #[arg(long, global = true)]
    first_step_only: Option<bool>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single scenario from a TOML config file.
    Run {
        /// Path to the scenario config.
        config: PathBuf,
    },
    /// Run a set of scenarios (files, or directories scanned for *.toml).
    Batch {
        /// Scenario files or directories.
        paths: Vec<PathBuf>,
        /// Worker threads for the batch (default 1).
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Run a built-in preset scenario, or list them when no name is given.
    Preset {
        /// Preset name (omit to list available presets).
        name: Option<String>,
    },
}

/// Command-line overrides applied on top of a parsed config file.
#[derive(Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stability: Option<StabilityChoice>,
    pub first_step_only: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, file: &mut ConfigFile) {
        if let Some(seed) = self.seed {
            file.scenario.seed = seed;
        }
        if let Some(stability) = self.stability {
            file.mpc.stability = stability;
        }
        if let Some(first) = self.first_step_only {
            file.mpc.first_step_only = first;
        }
    }
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(OUT_DIR_DEFAULT))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        stability: cli.stability,
        first_step_only: cli.first_step_only,
    };
    let out = out_dir(&cli.out);
    match cli.command {
        Command::Run { config: path } => {
            let (mut file, _) = match config::load(&path) {
                Ok(v) => v,
                Err(e) => return config_failure(&e.to_string()),
            };
            overrides.apply(&mut file);
            let id = config::scenario_id(&file, Some(&path));
            run_to_exit(&out, &id, &file)
        }
        Command::Batch { paths, parallel } => {
            let files = match batch::expand_inputs(&paths) {
                Ok(f) => f,
                Err(e) => return config_failure(&format!("{e:#}")),
            };
            match batch::run_batch(&files, &out, &overrides, parallel) {
                Ok(agg) => {
                    println!(
                        "batch: {}/{} succeeded (success rate {:.3})",
                        agg.n_success, agg.n_runs, agg.success_rate
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Preset { name: None } => {
            println!("available presets:");
            for name in presets::PRESET_NAMES {
                println!("  {:<12} {}", name, presets::describe(name));
            }
            ExitCode::SUCCESS
        }
        Command::Preset { name: Some(name) } => match presets::preset(&name) {
            Some(mut file) => {
                overrides.apply(&mut file);
                let id = config::scenario_id(&file, None);
                run_to_exit(&out, &id, &file)
            }
            None => {
                eprintln!("error: unknown preset `{name}`");
                eprintln!("available presets:");
                for name in presets::PRESET_NAMES {
                    eprintln!("  {:<12} {}", name, presets::describe(name));
                }
                ExitCode::from(2)
            }
        },
    }
}

fn config_failure(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

/// Run one scenario, emit artifacts, print the summary line, and map the
/// outcome to an exit code.
fn run_to_exit(out: &std::path::Path, id: &str, file: &ConfigFile) -> ExitCode {
    // Configuration errors surface before any simulation work.
    let scenario = match config::to_scenario(file) {
        Ok(s) => s,
        Err(e) => return config_failure(&e.to_string()),
    };
    let hash = config::config_hash(file);
    let started = Instant::now();
    match stabmpc::sim::run_scenario(&scenario) {
        Ok(result) => {
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            let dir = out.join(id);
            match output::emit_outputs(&dir, id, file, &hash, &result, wall_ms) {
                Ok(_) => {
                    let m = &result.metrics;
                    println!(
                        "{id}: success={} height_err_mean={:.4} max_eta={:.4} ticks={} ({:.0} ms) -> {}",
                        m.success,
                        m.height_error_mean,
                        m.max_eta_norm,
                        result.trace.len(),
                        wall_ms,
                        dir.display()
                    );
                    if m.success {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: emitting outputs: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
