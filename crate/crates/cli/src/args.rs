use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cpforest", version, about = "Relation extraction over causality-pruned semantic dependency forests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted trigger pairs.
    GenData(GenDataArgs),
    /// Train the base model without pruning.
    Pretrain(PretrainArgs),
    /// Compute edge attributions of a base model over its explanation subset.
    ExplainDataset(ExplainDatasetArgs),
    /// Fit the explainer to attribution records.
    TrainExplainer(TrainExplainerArgs),
    /// Train the full model with a frozen explainer pruning every forest.
    Train(TrainArgs),
    /// Score a checkpoint on a data file.
    Eval(EvalArgs),
    /// Run the whole protocol on each cross-validation fold.
    Crossval(CrossvalArgs),
    /// Train and score every cell of a (heads, alpha, beta) grid.
    Sweep(SweepArgs),
    /// Rank the token pairs of one instance by averaged explanation weight.
    ExplainInstance(ExplainInstanceArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSON-lines instance file.
    #[arg(long)]
    pub data: PathBuf,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

/// A run configuration file and flags that override its fields.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sentence-level` or `n-ary`.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub entities: Option<usize>,
    /// Attention heads N.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Graph blocks M.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Convolution layers L per block.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub explain_fraction: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub explainer_epochs: Option<usize>,
    #[arg(long)]
    pub disable_semantic: bool,
    #[arg(long)]
    pub disable_pruning: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON generator configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the planted trigger pair of every instance as JSON.
    #[arg(long)]
    pub planted: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainDatasetArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// The training data the checkpoint was fit on.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// JSON-lines record file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainExplainerArgs {
    /// Pre-trained checkpoint the records came from.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub explainer: PathBuf,
    /// Accept an explainer from a different pre-training run.
    #[arg(long)]
    pub allow_mismatch: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Metrics file; printed to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Training data.
    #[command(flatten)]
    pub data: DataArgs,
    /// Test data.
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// JSON grid `{"heads": [...], "alpha": [...], "beta": [...]}`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Fill the `seconds` column with wall-clock times.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainInstanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Explainer checkpoint; defaults to the one stored in a full checkpoint.
    #[arg(long)]
    pub explainer: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub instance_id: String,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub dot: Option<PathBuf>,
    /// Ranked edges as JSON; printed to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
