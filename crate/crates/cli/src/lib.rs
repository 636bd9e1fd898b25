//! Command implementations.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod tsv;

pub use commands::{
    cmd_count_params, cmd_dataset_stats, cmd_evaluate, cmd_inspect_gates, cmd_tag, cmd_train,
    load_config, RunManifest, TrainOutcome, FAILED_MARKER, MANIFEST_FILE, MODEL_FILE,
    REPORT_JSON, REPORT_TSV,
};
pub use tsv::{gate_rows, GateRow};

#[derive(Debug, Parser)]
#[command(name = "seqlab", version, about = "Neural sequence labeling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model with early stopping on a development set.
    Train(TrainArgs),
    /// Score a labeled file with a trained model.
    Evaluate(EvaluateArgs),
    /// Append a predicted-label column to each token line.
    Tag(TagArgs),
    /// Export per-token attention gate values.
    InspectGates(InspectGatesArgs),
    /// Count trainable parameters, with and without word embeddings.
    CountParams(CountParamsArgs),
    /// Token and label counts per split.
    DatasetStats(DatasetStatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Key-value config file; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Output directory for the manifest, model, and report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_name = "word|concat|attention")]
    pub arch: Option<String>,
    #[arg(long, value_name = "softmax|crf")]
    pub output: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set max_epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the metric the model was trained with.
    #[arg(long, value_name = "acc|span-f1|f0.5")]
    pub metric: Option<String>,
    /// Positive label for f0.5; defaults to the model's setting.
    #[arg(long)]
    pub positive: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Write here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectGatesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CountParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training file the vocabulary is built from.
    #[arg(long)]
    pub vocab_from: PathBuf,
    /// Count for these architectures instead of the configured one.
    #[arg(long, value_delimiter = ',', value_name = "ARCH,...")]
    pub arch: Vec<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetStatsArgs {
    /// Training split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Row name; defaults to the data file name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "-")]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub token_column: usize,
    /// Defaults to the last column.
    #[arg(long)]
    pub label_column: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a, stdout),
        Command::Tag(a) => cmd_tag(&a, stdout),
        Command::InspectGates(a) => cmd_inspect_gates(&a),
        Command::CountParams(a) => cmd_count_params(&a, stdout),
        Command::DatasetStats(a) => cmd_dataset_stats(&a, stdout),
    }
}
