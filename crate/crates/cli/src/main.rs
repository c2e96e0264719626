mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynroute_core::Error;

/// Dynamic scale routing for segmentation: spaces, costs, training and route analysis.
#[derive(Parser, Debug)]
#[command(name = "dynroute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Describe a routing space or print a preset mask.
    Space(SpaceArgs),
    /// Analytic cost report of a static mask.
    Cost(CostArgs),
    /// Train a network from a config file.
    Train(TrainArgs),
    /// Extract the common network and activation histogram from a route log.
    Extract(ExtractArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory; overrides DYNROUTE_OUT and the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpaceArgs {
    #[arg(long, default_value_t = 16)]
    pub layers: usize,
    #[arg(long, default_value_t = dynroute_core::space::DEFAULT_BASE_CHANNELS)]
    pub base_channels: usize,
    /// Print this preset's mask instead of the space.
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
    pub preset: Option<String>,
    /// Mask file in the canonical text form.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Space depth; defaults to the mask's own `layers`, else 16.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, default_value_t = dynroute_core::space::DEFAULT_BASE_CHANNELS)]
    pub base_channels: usize,
    /// Input as CxHxW.
    #[arg(long, default_value = "3x1024x2048")]
    pub input: String,
    #[arg(long, default_value_t = 19)]
    pub classes: usize,
    /// `macs` or `2macs`.
    #[arg(long, default_value = "macs")]
    pub convention: String,
    /// Count gates of active nodes.
    #[arg(long)]
    pub gates: bool,
    /// Print parameter counts without and with gates only.
    #[arg(long)]
    pub params_only: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Route log (JSON lines).
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    /// Mask name; defaults to the frozen mask named in the log header.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, conflicts_with = "full")]
    pub fast: bool,
    #[arg(long)]
    pub full: bool,
    /// Test hook: corrupt one analytic gradient entry.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Divergence { .. } | Error::Numeric(_) => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Space(a) => commands::space(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::Train(a) => commands::train(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
