//! `embrecon`: train a victim MLP on embeddings, reconstruct its training
//! set from the weights, evaluate, cluster, and invert a toy backbone.

mod commands;
mod ctx;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(name = "embrecon", version = ctx::version(), about = "Training-data reconstruction from MLP classifiers on embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Directory for outputs and `manifest.json`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON config; its keys mirror the command's flags (snake_case). Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic Gaussian-mixture embeddings, or toy images plus a backbone and their embeddings.
    GenData(GenDataArgs),
    /// Train the victim MLP with full-batch gradient descent.
    Train(TrainArgs),
    /// One reconstruction run with fixed hyperparameters.
    Reconstruct(ReconstructArgs),
    /// Randomized hyperparameter sweep of reconstruction runs.
    Sweep(SweepArgs),
    /// Agglomerative clustering of candidates and cluster representatives.
    Cluster(ClusterArgs),
    /// Invert backbone embeddings back to images.
    Invert(InvertArgs),
    /// Match candidates to the training set and count good reconstructions.
    Evaluate(EvaluateArgs),
    /// Plot-ready CSVs and a readable summary.
    Report(ReportArgs),
    /// Width × dataset-size study.
    Grid(GridArgs),
    /// Attack training checkpoints.
    Iters(ItersArgs),
    /// Activation-maximization baseline.
    AmBaseline(AmBaselineArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", ctx::Failure::new("usage", first));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Sweep(a) => sweep(a),
        Command::Cluster(a) => cluster(a),
        Command::Invert(a) => invert(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Grid(a) => grid(a),
        Command::Iters(a) => iters(a),
        Command::AmBaseline(a) => am_baseline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::FAILURE
        }
    }
}
