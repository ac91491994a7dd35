//! `fcntag`: batch pipeline driver. Preprocess audio into feature files,
//! train and evaluate taggers, score clips, inspect architectures, render
//! plots, and synthesize the toy dataset.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use fcntag::audio::{AudioError, FeatureFileError, WavError};
use fcntag::data::DataError;
use fcntag::eval::EvalError;
use fcntag::model::{CheckpointError, ModelError};
use fcntag::train::TrainError;

mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => write!(f, "{m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WavError> for CliError {
    fn from(e: WavError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FeatureFileError> for CliError {
    fn from(e: FeatureFileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownModel(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGrad { .. } => {
                CliError::Numerical(e.to_string())
            }
            TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => CliError::from(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "fcntag", version, about = "fully convolutional music auto-tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one feature file per manifest clip, with an index
    Preprocess(PreprocessArgs),
    /// Fit a tagger; writes history.csv and best.ckpt into the run dir
    Train(TrainArgs),
    /// Score a split against its labels and report per-tag AUC
    Evaluate(EvaluateArgs),
    /// Write raw tag scores for clips
    Predict(PredictArgs),
    /// Print a model's blocks, shape trace and parameter counts
    Inspect(InspectArgs),
    /// Generate the synthetic tagging dataset
    Synth(SynthArgs),
    /// Render learning-curve and bin-resolution SVGs
    Plot(PlotArgs),
}

#[derive(clap::Args)]
pub struct PreprocessArgs {
    /// key = value settings file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Feature kind: mel, stft or mfcc
    #[arg(long)]
    input: Option<String>,
    /// Output directory for feature files and index.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frames per clip (shorter clips pad, longer trim)
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory produced by preprocess
    #[arg(long)]
    features: Option<PathBuf>,
    /// One of the registered architectures, e.g. fcn4, fcn4s, mfcc4
    #[arg(long)]
    model: Option<String>,
    /// Expected feature kind; must agree with the model
    #[arg(long)]
    input: Option<String>,
    /// Run directory for config echo, history and checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Vocabulary size: the most frequent tags of the train split
    #[arg(long)]
    tags: Option<usize>,
}

#[derive(clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Also render ROC curves for every scorable tag
    #[arg(long)]
    roc: bool,
}

#[derive(clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Restrict to one split; scores every clip when absent
    #[arg(long)]
    split: Option<String>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
pub struct InspectArgs {
    /// Model name; an unknown name lists the registry
    model: String,
    #[arg(long, default_value_t = 50)]
    output_dim: usize,
}

#[derive(clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long)]
    rate: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
pub struct PlotArgs {
    /// A run directory, or a directory of run directories
    #[arg(long)]
    run: PathBuf,
    /// Where to put the SVGs; defaults to the run directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess(a) => commands::cmd_preprocess(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Evaluate(a) => commands::cmd_evaluate(a),
        Command::Predict(a) => commands::cmd_predict(a),
        Command::Inspect(a) => commands::cmd_inspect(a),
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Plot(a) => commands::cmd_plot(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code());
        }
    }
}
