//! `dbm-lab`: runs configured experiments and the built-in flow oracles.
//!
//! Exit codes: 0 when all thresholds pass, 2 when the run completed but a
//! threshold failed, 1 on configuration or numerical errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dbm_core::experiment::{self, ExperimentConfig, ExperimentError, Report};

#[derive(Parser)]
#[command(name = "dbm-lab", version, about = "Dyson Brownian motion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML file.
    Run {
        config: PathBuf,
        /// Override a key, e.g. `--set sde.runs=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the characteristic solver against a closed-form flow.
    Oracle {
        #[arg(value_enum)]
        which: OracleKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Quadratic,
    Free,
}

fn execute(cli: Cli) -> Result<Report, ExperimentError> {
    match cli.command {
        Command::Run { config, mut set, seed, out } => {
            if let Some(s) = seed {
                set.push(format!("sde.seed={s}"));
            }
            let cfg = ExperimentConfig::from_file(&config, &set)?;
            let dir = out.or_else(|| cfg.out_dir.clone());
            experiment::run(&cfg, dir.as_deref())
        }
        Command::Oracle { which, out } => {
            let name = match which {
                OracleKind::Quadratic => "quadratic",
                OracleKind::Free => "free",
            };
            let cfg = experiment::oracle_config(name)?;
            experiment::run(&cfg, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(report) => {
            print!("{}", report.to_json());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                for f in &report.failures {
                    eprintln!("threshold failed: {f}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
