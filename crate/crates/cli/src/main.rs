mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qutrit_bexd::campaign::Profile;

/// Online Bayesian characterization of a driven, decaying qutrit.
#[derive(Debug, Parser)]
#[command(name = "qutrit-bexd", version)]
pub struct Cli {
    /// TOML configuration; omitted sections fall back to the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default settings to start from.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Overrides the campaign seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continue a campaign from the snapshot in the output directory.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Population time series of a pulse from a basis state.
    Simulate {
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Run the adaptive design campaign.
    Characterize,
    /// Report when a pulse makes each parameter subset identifiable.
    IdentifiabilityCheck {
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Model-prediction error of a posterior on the repeated reference gate.
    Validate {
        /// Ensemble snapshot; defaults to the final ensemble in the output directory.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("configuration error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
