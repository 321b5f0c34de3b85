//! `dk`: dataset generation, training, gradient checks, ERF maps, inspection
//! and manifest replay.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error.

mod dataset;
mod erf;
mod gradcheck;
mod inspect;
mod manifest;
mod replay;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Env var capping worker threads; unset means one thread.
const THREADS_VAR: &str = "DK_NUM_THREADS";

#[derive(Parser)]
#[command(
    name = "dk",
    version,
    about = "Deformable kernels: training, gradient checks and receptive-field maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Dataset(dataset::Args),
    /// Train a shape classifier.
    Train(train::Args),
    /// Compare analytic gradients against central differences.
    Gradcheck(gradcheck::Args),
    /// Compute an effective receptive field map.
    Erf(erf::Args),
    /// Describe a checkpoint, tensor file or manifest.
    Inspect(inspect::Args),
    /// Re-run a manifest and compare artifacts byte for byte.
    Replay(replay::Args),
}

/// A run that completed but whose check did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<CheckFailed>() {
        return 1;
    }
    match err.downcast_ref::<dk_core::Error>() {
        Some(dk_core::Error::Divergence { .. }) => 1,
        _ => 2,
    }
}

fn init_threads(forced: Option<usize>) -> anyhow::Result<()> {
    let threads = match (forced, std::env::var(THREADS_VAR)) {
        (Some(n), _) => n,
        (None, Ok(v)) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                anyhow::anyhow!("{THREADS_VAR} must be a positive integer, got `{v}`")
            })?,
        (None, Err(_)) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let forced = matches!(cli.command, Command::Replay(_)).then_some(1);
    init_threads(forced)?;
    match cli.command {
        Command::Dataset(a) => dataset::run(a),
        Command::Train(a) => train::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Erf(a) => erf::run(a),
        Command::Inspect(a) => inspect::run(a),
        Command::Replay(a) => replay::run(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
