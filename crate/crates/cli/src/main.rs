//! `fhpe`: synthesize fisheye face datasets, train and evaluate the location-guided
//! pose network, run ablations and gradient checks.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fhpe", version, about = "Fisheye head-pose estimation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a procedural marker dataset as a source manifest.
    GenMarkers(commands::GenMarkersArgs),
    /// Build a fisheye dataset from a source manifest.
    Synth(commands::SynthArgs),
    /// Train a model on a fisheye manifest.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a fisheye manifest.
    Eval(commands::EvalArgs),
    /// Train and evaluate module/supervision ablation variants.
    Ablate(commands::AblateArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(commands::GradcheckArgs),
    /// Apply the fisheye warp to a single image.
    Warp(commands::WarpArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let c = &cli.common;
    match cli.command {
        Command::GenMarkers(a) => commands::gen_markers(c, a),
        Command::Synth(a) => commands::synth(c, a),
        Command::Train(a) => commands::train(c, a),
        Command::Eval(a) => commands::eval(c, a),
        Command::Ablate(a) => commands::ablate(c, a),
        Command::Gradcheck(a) => commands::gradcheck(c, a),
        Command::Warp(a) => commands::warp(c, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
