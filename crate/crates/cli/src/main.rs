//! `cdml`: simulate partially linear data, estimate treatment effects with
//! DML or C-DML, and run replication, bias and bootstrap studies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cdml::pipeline::Method;
use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "cdml", version, about = "Double machine learning and coordinated DML studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated dataset (CSV plus truth sidecar)
    Simulate(Common),
    /// Estimate the treatment effect on one dataset
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Use the true nuisance functions (synthetic data only)
        #[arg(long)]
        oracle: bool,
    },
    /// Replicate estimators over simulated datasets
    Experiment(Common),
    /// Compare empirical DML errors with the theoretical bias
    BiasVerify(Common),
    /// Percentile bootstrap intervals for the effect
    Bootstrap(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replication-level parallelism
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// dml_nn, dml_rf, cdml or dml_oracle
    #[arg(long)]
    method: Option<Method>,
    /// Comma-separated raw gamma grid, e.g. 0,0.1,1
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma_u: Option<f64>,
    /// Number of replications
    #[arg(long)]
    reps: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref()).map_err(CliError::Usage)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
            method: self.method,
            gamma_grid: self.gamma_grid.clone(),
            rho: self.rho,
            sigma_u: self.sigma_u,
            reps: self.reps,
        });
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (common, oracle) = match &cli.command {
        Command::Estimate { common, oracle } => (common, *oracle),
        Command::Simulate(c) | Command::Experiment(c) | Command::BiasVerify(c) | Command::Bootstrap(c) => (c, false),
    };
    let mut cfg = common.resolve()?;
    if oracle {
        cfg.method = Method::DmlOracle;
    }
    if cfg.workers > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let (out, failed) = match cli.command {
        Command::Simulate(_) => (commands::simulate(&cfg)?, false),
        Command::Estimate { .. } => (commands::estimate(&cfg)?, false),
        Command::Experiment(_) => commands::experiment(&cfg)?,
        Command::BiasVerify(_) => commands::bias_verify(&cfg)?,
        Command::Bootstrap(_) => (commands::bootstrap(&cfg)?, false),
    };
    println!("{out}");
    Ok(failed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: one or more replications failed; see the summary");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
