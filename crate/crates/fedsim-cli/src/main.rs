//! `fedsim`: deterministic federated-learning experiments from a TOML
//! config.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failures, 2 on
//! configuration problems (bad config values, infeasible partition plans,
//! refusing to overwrite existing outputs).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::Error;

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-learning simulator",
    long_about = "Deterministic federated-learning simulator.\n\n\
        Experiments are described by a TOML config with [model], [data], \
        [strategy], [privacy], and [run] tables; every key has a default. \
        Precedence: --set overrides the file, and --seed/--threads override \
        both."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven commands.
#[derive(Args)]
pub struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    pub config: PathBuf,

    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,

    /// Override the run seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Override the client-training thread cap; never changes results.
    #[arg(long)]
    pub threads: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,

    /// Override a config value, e.g. --set privacy.mode=metric.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Split the source dataset into per-client and server files.
    Partition(CommonArgs),
    /// Run the federated loop on existing partitions.
    Run(CommonArgs),
    /// Run the one-round client inference attack across privacy modes.
    Cia(CommonArgs),
    /// Join summary.json files under --out into one comparison table.
    Report {
        /// Directory to scan for summary.json files.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing report.csv.
        #[arg(long)]
        force: bool,
    },
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::InfeasiblePlan { .. } | Error::TooFewSets(_) => 2,
        Error::Round { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Partition(args) => commands::cmd_partition(args),
        Command::Run(args) => commands::cmd_run(args),
        Command::Cia(args) => commands::cmd_cia(args),
        Command::Report { out, force } => commands::cmd_report(out, *force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
