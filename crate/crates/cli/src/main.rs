//! `phenofuse` command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "phenofuse", version, about = "Level-aware multi-view plant trait regression")]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a cache for non-finite values, duplicates and invalid fields.
    ValidateCache(ValidateArgs),
    /// Write a synthetic cache, its ground-truth table and a prior table.
    Synth(SynthArgs),
    /// Train the auxiliary level regressor.
    TrainLevel(TrainLevelArgs),
    /// Train a unimodal or multimodal regressor.
    Train(TrainArgs),
    /// Evaluate a model on held-out plants.
    Eval(EvalArgs),
    /// Sweep MAE against the share of views removed at inference.
    Sensitivity(SensitivityArgs),
    /// Re-render a saved report or curve, optionally against a baseline curve.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Cache base path (or its `.manifest.json`).
    pub cache: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output base path for the cache, `<out>.truth.csv` and the priors.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub plants: u32,
    #[arg(long, default_value_t = 20)]
    pub days: u32,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Comma-separated crop names.
    #[arg(long, value_delimiter = ',', default_value = "mustard,radish,wheat")]
    pub crops: Vec<String>,
    /// Put level, age and leaf count on coordinate axes 0, 1 and 2.
    #[arg(long)]
    pub axis_aligned: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shuffle mini-batches each epoch (true or false).
    #[arg(long)]
    pub shuffle: Option<bool>,
}

#[derive(Args, Debug)]
pub struct TrainLevelArgs {
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Checkpoint base path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plants excluded from training, as `crop:plant`.
    #[arg(long, value_delimiter = ',')]
    pub hold_out: Vec<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `unimodal` or `multimodal`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Prior table base path (multimodal only).
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Checkpoint base path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub hold_out: Vec<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Checkpoint base path of the model to evaluate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Prior table; defaults to the copy stored next to a multimodal model.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Plants to evaluate on, as `crop:plant`; all groups when omitted.
    #[arg(long, value_delimiter = ',')]
    pub hold_out: Vec<String>,
    /// `metadata` or `regressor`.
    #[arg(long)]
    pub level_source: Option<String>,
    /// Level regressor checkpoint, required with `--level-source regressor`.
    #[arg(long)]
    pub level_model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Removal percentages, strictly increasing in [0, 100).
    #[arg(long, value_delimiter = ',')]
    pub percentages: Vec<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A `report.json` or `sensitivity.json`.
    pub input: PathBuf,
    /// `json`, `csv` or `md`.
    #[arg(long, default_value = "md")]
    pub format: String,
    /// Baseline `sensitivity.json` for a robustness comparison.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
