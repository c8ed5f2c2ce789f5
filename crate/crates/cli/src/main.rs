//! `strassennet`: search for ternary matrix multiplication algorithms,
//! count multiplication budgets, and train, export and run SPN networks.

mod budget_cmd;
mod io;
mod model_cmd;
mod strassen_cmd;
mod train_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use strassennet::train::{gaussian_blobs, BlobConfig};

/// How a command finished when it did not error.
pub enum Outcome {
    Success,
    /// The command ran but its check failed (inexact solution, no solution found).
    Failure,
}

#[derive(Debug, Parser)]
#[command(name = "strassennet", version, about)]
struct Cli {
    /// Seed for every random choice; falls back to the environment.
    #[arg(long, global = true, env = "STRASSENNET_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Matrix multiplication algorithm search and verification.
    #[command(subcommand)]
    Strassen(strassen_cmd::StrassenCmd),
    /// Multiplication, addition and size budget of an architecture.
    Budget(budget_cmd::BudgetArgs),
    /// Train a model on an IDX dataset.
    Train(train_cmd::TrainArgs),
    /// Fold scales and pack ternary weights for the inference kernel.
    Export(model_cmd::ExportArgs),
    /// Run an exported model and count its operations.
    Infer(model_cmd::InferArgs),
    /// Write a synthetic Gaussian-blob dataset in IDX format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        side: usize,
        /// Pixel noise standard deviation on the 0–255 scale.
        #[arg(long, default_value_t = 40.0)]
        noise: f64,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.cmd {
        Cmd::Strassen(cmd) => strassen_cmd::run(cmd, cli.seed),
        Cmd::Budget(args) => budget_cmd::run(args),
        Cmd::Train(args) => train_cmd::run(args, cli.seed),
        Cmd::Export(args) => model_cmd::run_export(args),
        Cmd::Infer(args) => model_cmd::run_infer(args),
        Cmd::GenData { out, classes, per_class, side, noise } => {
            let data = gaussian_blobs(&BlobConfig { classes, per_class, side, noise }, cli.seed.unwrap_or(0))?;
            let (mut images, mut labels) = (Vec::new(), Vec::new());
            data.write_idx(&mut images, &mut labels)?;
            io::write_atomic(&out.join("images.idx"), &images)?;
            io::write_atomic(&out.join("labels.idx"), &labels)?;
            Ok(Outcome::Success)
        }
    }
}

/// 1: a check failed; 2: bad input or configuration; 3: training diverged.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<strassennet::Error>() {
        Some(strassennet::Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failure) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
