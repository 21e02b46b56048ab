//! `msvit`: train, evaluate, profile, and inspect spiking vision transformers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 training
//! divergence.

mod commands;
mod data;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::DataArgs;

#[derive(Debug)]
pub enum Failure {
    /// Every problem found, reported together.
    Config(Vec<String>),
    Runtime(String),
    Diverged(String),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(vec![msg.into()])
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Diverged(_) => 4,
        }
    }
}

impl From<msvit_core::Error> for Failure {
    fn from(e: msvit_core::Error) -> Self {
        use msvit_core::Error;
        match e {
            Error::Config(errs) => Failure::Config(errs),
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(errs) => {
                write!(f, "invalid configuration:")?;
                for e in errs {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            Failure::Runtime(m) => write!(f, "{m}"),
            Failure::Diverged(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "msvit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, summary.json and model.ckpt.
    Train(TrainArgs),
    /// Report top-1/top-5 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Per-layer FLOPs and parameters, and realized energy on a data slice.
    Profile(ProfileArgs),
    /// Print the resolved architecture as a loadable config file.
    Inspect(InspectArgs),
    /// Write synthetic event streams as CSV files.
    SynthData(SynthDataArgs),
}

/// Where the model comes from. Flags override file values.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Named profile shipped with the repository.
    #[arg(long, conflicts_with = "config")]
    pub profile: Option<String>,
    /// Model config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of timesteps.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Seed for weight initialization and data order.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Hyperparameter file (TOML); flags below override it.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Total epochs, including those of a resumed run.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub accum_steps: Option<usize>,
    /// Flip and pad-crop augmentation of static images.
    #[arg(long)]
    pub augment: bool,
    /// Record no wall-clock times, so outputs are byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from the outputs of an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Attach the profiler and write energy.json.
    #[arg(long)]
    pub energy: bool,
    /// Directory for summary.json and energy.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for symmetry with `train`; evaluation is always deterministic.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Profile a trained checkpoint instead of a fresh model.
    #[arg(long, conflicts_with_all = ["profile", "config"])]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Test samples to run for realized firing rates.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Also report the non-spiking energy, E_MAC times total FLOPs.
    #[arg(long)]
    pub ann_equivalent: bool,
    /// Directory for energy.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with_all = ["profile", "config"])]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Output directory; `train/` and `test/` are created inside.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 30)]
    pub test_per_class: usize,
    /// First generator seed of the training streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Profile(a) => commands::profile(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::SynthData(a) => commands::synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
