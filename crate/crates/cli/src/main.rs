//! `crowd`: synthesise corpora, generate ground truth, train, evaluate and
//! self-check the density estimator.
//!
//! Exit status is 0 on success, 1 for invalid input (bad flags, unreadable or
//! inconsistent configuration) and 2 for failures while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowd_density::corpus::Split;
use crowd_density::sit::MixerMode;
use crowd_density::synth::DensityProfile;
use crowd_density::training::LossMode;

use config::{Precision, UsageError};

#[derive(Parser, Debug)]
#[command(name = "crowd", version, about = "Scale-invariant crowd density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (PGM images, JSON annotations, manifest).
    Synth(SynthArgs),
    /// Write a density map for every annotated image of a corpus.
    Gt(GtArgs),
    /// Train a model and write its log and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on whole images.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on downsampled copies of the images.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a corpus it was not trained on.
    CrossEval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Verify the mixer expansion on random draws.
    MixerTest(MixerTestArgs),
    /// Render a density map file as a viewable PGM image.
    ExportPgm(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON configuration (or an earlier run.json); flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub profile: Option<DensityProfile>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Fewest people per image.
    #[arg(long)]
    pub min_people: Option<usize>,
    /// Most people per image.
    #[arg(long)]
    pub max_people: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus identifier recorded in the run echo.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GtKind {
    Fixed,
    Adaptive,
}

#[derive(Args, Debug)]
pub struct GtArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<GtKind>,
    /// Kernel width in fixed mode; fallback width in adaptive mode.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossMode>,
    /// stochastic, fixed:<alpha> or off.
    #[arg(long)]
    pub mixer: Option<MixerMode>,
    /// Feed each block only the previous block's output.
    #[arg(long)]
    pub no_dense: bool,
    /// Number of channel groups per block.
    #[arg(long = "G")]
    pub groups: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Disable random horizontal flips.
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated area ratios in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MixerTestArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of channel groups.
    #[arg(long = "G")]
    pub groups: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Density map (.dmap) to render.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// PGM file to write; run.json goes into its directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_status(err: &anyhow::Error) -> u8 {
    use crowd_density::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(E::Argument(_) | E::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Gt(a) => commands::gt(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::CrossEval(a) => commands::cross_eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::MixerTest(a) => commands::mixer_test(a),
        Command::ExportPgm(a) => commands::export_pgm(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
