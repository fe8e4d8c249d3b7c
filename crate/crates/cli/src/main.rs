//! `fbinv`: batch front-end for feedback invariants of scalar control systems.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail};
use clap::{Parser, Subcommand};

use crate::commands::{RunContext, ORBIT_SEEDS};
use crate::config::RunConfig;
use crate::exit::{CliResult, ResultExt, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "fbinv", version, about = "Feedback invariants of scalar control systems")]
struct Cli {
    /// JSON file defining systems, maps, grid and tolerances.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output file (CSV for `signature` and `transform`, the report otherwise).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the config `tol_rel`.
    #[arg(long, global = true, value_name = "X")]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// J, K, bracket scalars, derivatives of J and regularity flags at points.
    Invariants {
        system: String,
        /// Base point `x,u,u1`; repeatable. Defaults to the domain centre.
        #[arg(long = "point", value_name = "X,U,U1", allow_hyphen_values = true, value_parser = parse_triple::<f64>)]
        points: Vec<[f64; 3]>,
    },
    /// Signature cloud CSV plus a sidecar of skipped points.
    Signature {
        system: String,
        /// Grid counts `nx,nu,nu1`; overrides the config grid.
        #[arg(long, value_name = "NX,NU,NU1", value_parser = parse_triple::<usize>)]
        grid: Option<[usize; 3]>,
    },
    /// Decides local feedback equivalence; exit 0, 1 or 2 for EQUIVALENT,
    /// NOT_EQUIVALENT or INCONCLUSIVE.
    Equiv { a: String, b: String },
    /// Pushes a system forward by a map and checks invariance of J.
    Transform { system: String, map: String },
    /// Orbit dimensions of the prolonged feedback group action.
    OrbitDim {
        /// Jet orders; defaults to 1 2 3 4.
        #[arg(value_delimiter = ',')]
        k: Vec<usize>,
        /// Random jets per order, seeded from `--seed` upward.
        #[arg(long, default_value_t = ORBIT_SEEDS)]
        seeds: usize,
        /// Also report ranks through jets with `f_u1 = 0`.
        #[arg(long)]
        singular: bool,
        /// JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> anyhow::Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("expected three comma-separated values, got `{s}`");
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|e| anyhow!("`{p}`: {e}"))?);
    }
    out.try_into().map_err(|_| anyhow!("expected three values"))
}

fn run(cli: Cli) -> CliResult<u8> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(tol) = cli.tol {
        config.tol_rel = tol;
    }
    config.validate().usage()?;
    let cx = RunContext::new(config, cli.out);
    match cli.command {
        Command::Invariants { system, points } => {
            if points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(anyhow!("points must be finite")).usage();
            }
            commands::invariants(&cx, &system, &points)
        }
        Command::Signature { system, grid } => {
            if grid.is_some_and(|g| g.iter().any(|&n| n < 2)) {
                return Err(anyhow!("grid counts must be at least 2")).usage();
            }
            commands::signature(&cx, &system, grid)
        }
        Command::Equiv { a, b } => commands::equiv(&cx, &a, &b),
        Command::Transform { system, map } => commands::transform(&cx, &system, &map),
        Command::OrbitDim {
            k,
            seeds,
            singular,
            json,
        } => commands::orbit_dim(&cx, &k, seeds, singular, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
