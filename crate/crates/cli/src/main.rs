//! `weaksens`: run weak/strong sensitivity experiments from a TOML config.
//!
//! Every command writes `<out>/<command>.csv` plus a `<command>.txt`
//! summary, and prints the summary. Exit codes: 0 success, 1 usage,
//! 2 invalid configuration or input file, 3 numerical failure or failed
//! verdict. `WEAKSENS_THREADS` sets the worker count; results do not
//! depend on it.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weaksens::danskin::DEFAULT_TIE_TOL;

use crate::commands::Table;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "weaksens", version, about = "Weak and strong utility sensitivities by Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Time steps per path.
    #[arg(long)]
    steps: Option<usize>,
    /// Horizon T.
    #[arg(long = "T", value_name = "T")]
    horizon: Option<f64>,
    /// Random seed (mandatory, here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Weak and strong values over the perturbation grid.
    Value(Common),
    /// Weak sensitivity formulas against finite differences.
    Sens(Common),
    /// Indicator-drift example with closed-form weak and strong derivatives.
    Example1 {
        #[command(flatten)]
        common: Common,
        /// Allowed |error| of the strong estimate.
        #[arg(long, default_value_t = 0.01)]
        tol_strong: f64,
        /// Allowed |error| of the weak estimate.
        #[arg(long, default_value_t = 0.015)]
        tol_weak: f64,
    },
    /// Discrepancy between weak and strong derivatives in one dimension.
    Example2(Common),
    /// Kernel-stability check of volatility perturbations.
    H1check(Common),
    /// Modular functionals, Orlicz norms and the Hölder inequality.
    Norms(Common),
    /// Support function of a point cloud and its directional derivative.
    Danskin {
        #[command(flatten)]
        common: Common,
        /// CSV of points, one per line.
        #[arg(long)]
        cloud: PathBuf,
        /// Comma-separated direction d.
        #[arg(long, allow_hyphen_values = true)]
        direction: String,
        /// Comma-separated perturbation of d.
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<String>,
        /// Relative tolerance for ties in the maximum.
        #[arg(long, default_value_t = DEFAULT_TIE_TOL)]
        tie_tol: f64,
    },
    /// First-order residuals of the weak value along a direction.
    Secondorder(Common),
    /// Print the resolved configuration (after command-line overrides) as TOML.
    Config(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        paths: common.paths,
        steps: common.steps,
        horizon: common.horizon,
        seed: common.seed,
        out: common.out.clone(),
    });
    Ok(cfg)
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

fn write_table(dir: &Path, name: &str, table: &Table) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let csv_path = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_failure(&csv_path, e))?;
    w.write_record(&table.header).map_err(|e| io_failure(&csv_path, e))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| io_failure(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_failure(&csv_path, e))?;
    let txt_path = dir.join(format!("{name}.txt"));
    let mut text = table.summary.join("\n");
    text.push('\n');
    std::fs::write(&txt_path, text).map_err(|e| io_failure(&txt_path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, table, cfg) = match cli.command {
        Command::Config(c) => {
            let cfg = load(&c)?;
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Value(c) => {
            let cfg = load(&c)?;
            ("value", commands::value(&cfg)?, cfg)
        }
        Command::Sens(c) => {
            let cfg = load(&c)?;
            ("sens", commands::sens(&cfg)?, cfg)
        }
        Command::Example1 {
            common,
            tol_strong,
            tol_weak,
        } => {
            let cfg = load(&common)?;
            let mc = cfg.mc_with(200_000, 2_000)?;
            ("example1", commands::example1(&mc, tol_strong, tol_weak)?, cfg)
        }
        Command::Example2(c) => {
            let cfg = load(&c)?;
            ("example2", commands::example2(&cfg)?, cfg)
        }
        Command::H1check(c) => {
            let cfg = load(&c)?;
            ("h1check", commands::h1check(&cfg)?, cfg)
        }
        Command::Norms(c) => {
            let cfg = load(&c)?;
            ("norms", commands::norms(&cfg)?, cfg)
        }
        Command::Danskin {
            common,
            cloud,
            direction,
            delta,
            tie_tol,
        } => {
            let cfg = load(&common)?;
            ("danskin", commands::danskin(&cloud, &direction, delta.as_deref(), tie_tol)?, cfg)
        }
        Command::Secondorder(c) => {
            let cfg = load(&c)?;
            ("secondorder", commands::second_order(&cfg)?, cfg)
        }
    };
    write_table(&cfg.out_dir(), name, &table)?;
    let mut out = std::io::stdout().lock();
    for line in &table.summary {
        let _ = writeln!(out, "{line}");
    }
    match table.failure {
        Some(why) => Err(CliError::Failure(why)),
        None => Ok(()),
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("WEAKSENS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("WEAKSENS_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("weaksens: {e}");
            e.exit_code()
        }
    }
}
