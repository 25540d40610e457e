//! Reproducible runs: every command reads one JSON configuration, works in
//! one output directory and leaves a hashed manifest of what it wrote.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "cfsim", version, about = "Explain a binary image classifier with coupled simulator networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into --out.
    Synthgen(Common),
    /// Train the classifier on --data.
    TrainClassifier(WithData),
    /// Train a simulator pair against a frozen classifier.
    TrainSimulator(WithModels),
    /// Write pattern or saliency maps for one method.
    Explain(ExplainArgs),
    /// Score every simulator and baseline against ground truth.
    Evaluate(WithModels),
    /// Render figures and summary tables.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults to the run's config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output (run or dataset) directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct WithData {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; defaults to the one recorded in the run manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WithModels {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Classifier checkpoint directory.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Simulator checkpoint directory; every simulator of the run when absent.
    #[arg(long)]
    pub simulator: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Proposed,
    Bp,
    GuidedBp,
    GradCam,
    GuidedGradCam,
    Occlusion,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[command(flatten)]
    pub models: WithModels,
}

/// Runs one command and returns its JSON summary.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Synthgen(a) => commands::synthgen(&a),
        Command::TrainClassifier(a) => commands::train_classifier(&a),
        Command::TrainSimulator(a) => commands::train_simulator(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Report(a) => commands::report(&a),
    }
}
