use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dspert_core::Format;

#[derive(Debug, Parser)]
#[command(
    name = "dspert",
    version,
    about = "Span-based NER with deep span representations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write history, metrics and the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Write predicted entities for every sentence of a corpus.
    Predict(PredictArgs),
    /// Run an ablation grid over seeds.
    Ablate(AblateArgs),
    /// Pre-logit statistics, template analysis and PCA of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Write the synthetic nested corpus as train/dev/test files.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding train/dev[/test] files; overrides the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// Directory for metrics.json and the breakdown CSVs; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// JSONL output file; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Depth,
    Aggregation,
    WeightSharing,
    Head,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub axis: Axis,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds; the config's `seeds` otherwise.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated span depths for the depth axis; 0..=num_layers otherwise.
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling seed for negatives and capped pair populations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Non-entity spans sampled per entity span.
    #[arg(long, default_value_t = 10)]
    pub negatives: usize,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Reads the `[data.synthetic]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "jsonl")]
    pub format: Format,
}
