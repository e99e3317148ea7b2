//! `epimfg`: run the solvers from a JSON config and write CSV artifacts plus
//! `summary.json`.
//!
//! Exit status:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | all gates passed                          |
//! | 1    | a gate failed (artifacts still written)   |
//! | 2    | configuration could not be read or is invalid |
//! | 3    | a solver or I/O error aborted the run     |

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use crate::commands::Summary;
use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "epimfg", version, about = "Mean-field game solvers for epidemic activity decisions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of belief grid nodes.
    #[arg(long = "grid-na", global = true)]
    grid_na: Option<usize>,
    /// Mean-field time step.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Fixed-point iteration cap.
    #[arg(long = "max-iters", global = true)]
    max_iters: Option<usize>,
    /// Fixed-point tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Equilibrium of the fully observed model.
    FoMfe,
    /// Best response and population flow for a given mean field.
    PoSolve,
    /// Partially observed equilibrium by damped Picard iteration.
    PoMfe,
    /// Stationary threshold constants, switching checks and PDE cross-check.
    Stationary,
    /// Policy near a = 0 along a ladder of lambda_ai values.
    Case1,
    /// Density solver against agent-based simulation.
    McValidate,
    /// Basic reproduction number.
    R0,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::FoMfe => "fo-mfe",
            Command::PoSolve => "po-solve",
            Command::PoMfe => "po-mfe",
            Command::Stationary => "stationary",
            Command::Case1 => "case1",
            Command::McValidate => "mc-validate",
            Command::R0 => "r0",
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("EPIMFG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("EPIMFG_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ov = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        grid_na: cli.grid_na,
        dt: cli.dt,
        max_iters: cli.max_iters,
        tol: cli.tol,
    };
    let cfg = match configure_threads().and_then(|_| RunConfig::load(cli.config.as_deref(), &ov)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, &cfg) {
        Ok(summary) => {
            println!("{}: {}", summary.command, if summary.pass { "PASS" } else { "FAIL" });
            for g in summary.gates.iter().filter(|g| !g.pass) {
                println!("  gate {} failed (value {}, tolerance {})", g.name, g.value, g.tolerance);
            }
            if summary.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{} failed: {e:#}", cli.command.name());
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command, cfg: &RunConfig) -> anyhow::Result<Summary> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = match cmd {
        Command::FoMfe => commands::fo_mfe_cmd(cfg, out),
        Command::PoSolve => commands::po_solve_cmd(cfg, out),
        Command::PoMfe => commands::po_mfe_cmd(cfg, out),
        Command::Stationary => commands::stationary_cmd(cfg, out),
        Command::Case1 => commands::case1_cmd(cfg, out),
        Command::McValidate => commands::mc_validate_cmd(cfg, out),
        Command::R0 => commands::r0_cmd(cfg),
    }
    .with_context(|| cmd.name().to_string())?;
    let summary = Summary {
        command: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        pass: outcome.gates.iter().all(|g| g.pass),
        gates: outcome.gates,
        results: outcome.results,
    };
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(out.join("summary.json"), text)?;
    Ok(summary)
}
