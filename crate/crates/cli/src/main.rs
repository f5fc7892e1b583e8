mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dcstop", version, about = "Distribution-constrained optimal stopping on Brownian lattices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON config file.
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, env = "DCSTOP_OUT_DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `solver.resolution`.
    #[arg(long)]
    pub resolution: Option<u32>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the atomic-constraint DPP; writes result.json and table.csv.
    Solve(Common),
    /// Solve and extract an optimal policy; writes policy.json.
    Policy(Common),
    /// LP value on the history tree.
    Oracle(Common),
    /// Solver against oracle plus DPP identity checks.
    Compare(Common),
    /// Monte Carlo run of the solver (or oracle) policy.
    Simulate(Common),
    /// Right-approximation sweep and optional concavity check.
    Stability(Common),
    /// Validate a config, and optionally a policy dump against it.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit 2.
    Validation(String),
    /// A numerical check failed: exit 3.
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Check(_) => 3,
        }
    }
}

impl From<dcstop_core::Error> for CliError {
    fn from(e: dcstop_core::Error) -> Self {
        match e {
            dcstop_core::Error::Numerical(_) | dcstop_core::Error::Mvm(_) => Self::Check(e.to_string()),
            other => Self::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Validation(format!("io: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Validation(msg) | CliError::Check(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
