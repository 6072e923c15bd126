//! `resrep` command-line driver: base training, ResRep training, conversion,
//! evaluation and the ablation trainers.

mod commands;
mod dataset;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::DataArgs;

/// Exit code for invalid arguments and inputs that do not fit together.
pub const EXIT_USAGE: u8 = 2;
/// Exit code when conversion would delete every channel of a layer.
pub const EXIT_FULLY_PRUNED: u8 = 3;

/// Rejected input; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "resrep", version, about = "Lossless channel pruning with compactors and gradient resetting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model from scratch.
    TrainBase(TrainBaseArgs),
    /// Insert compactors into a base model and train them with gradient resetting.
    Resrep(ResrepArgs),
    /// Delete near-zero compactor rows and fold compactors into the convs.
    Convert(ConvertArgs),
    /// Print the top-1 test accuracy of any checkpoint.
    Eval(EvalArgs),
    /// Train one of the ablation variants and search its minimal structure.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Schedule and batching shared by every trainer.
#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Number of epochs of the cosine schedule.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable pad-and-crop plus flip augmentation of 32×32 inputs.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from the checkpoint at `--out` if it exists. The stored
    /// configuration is used; schedule flags are ignored.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed epochs (the checkpoint stays resumable).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    /// Architecture: resnet56, resnet110 or miniconv.
    #[arg(long)]
    pub arch: String,
    /// Stage widths of miniconv, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Input height and width of miniconv.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub dtype: Precision,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write; logs are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Gradient-resetting hyper-parameters.
#[derive(Args, Debug, Clone)]
pub struct PenaltyArgs {
    /// Fraction of FLOPs to remove, in (0, 1).
    #[arg(long)]
    pub flops_target: Option<f64>,
    /// Penalty strength.
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    /// Channels selectable at the first selection event.
    #[arg(long, default_value_t = 4)]
    pub theta_init: usize,
    /// Growth of that limit at every later event.
    #[arg(long, default_value_t = 4)]
    pub theta_step: usize,
    /// Iterations between selection events.
    #[arg(long, default_value_t = 200)]
    pub interval: u64,
    /// Epochs before the first selection event.
    #[arg(long, default_value_t = 5)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 0.99)]
    pub compactor_momentum: f64,
}

#[derive(Args, Debug)]
pub struct ResrepArgs {
    /// Base checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Re-parameterized checkpoint.
    #[arg(long)]
    pub input: PathBuf,
    /// Compactor rows with a smaller norm are deleted.
    #[arg(long, default_value_t = resrep::reparam::PRUNE_EPSILON)]
    pub epsilon: f64,
    /// Skip measuring accuracy before and after conversion.
    #[arg(long)]
    pub skip_eval: bool,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationMode {
    GroupLasso,
    ResOnly,
    RepOnly,
    Resrep,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AblationMode,
    /// Channels removed per minimal-structure trial.
    #[arg(long, default_value_t = 1)]
    pub granularity: usize,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBase(a) => commands::train_base(&a),
        Command::Resrep(a) => commands::resrep(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<resrep::Error>() {
        Some(resrep::Error::FullyPruned { .. }) => EXIT_FULLY_PRUNED,
        _ => 1,
    }
}
