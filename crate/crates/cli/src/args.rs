//! Command-line definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "srsupm", version, about = "Shift-aware sequential recommendation: data preparation, training, evaluation and analysis")]
pub struct Cli {
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that receives every output of this run.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a raw interaction log and write the binary sample store and a dataset report.
    Prepare(PrepareArgs),
    /// Train a model on a prepared sample store.
    Train(TrainArgs),
    /// Score a checkpoint on a split and write metrics.
    Eval(EvalArgs),
    /// Train the full model and its four ablations and tabulate their test metrics.
    Ablate(AblateArgs),
    /// Train once per value of one hyperparameter and tabulate metrics and timings.
    Sweep(SweepArgs),
    /// Write the shift heatmap, pair distances and per-level metrics of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic interaction log with planted shift levels.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Jsonl,
}

impl From<FormatArg> for srsupm::corpus::Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => srsupm::corpus::Format::Tsv,
            FormatArg::Jsonl => srsupm::corpus::Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationFlags {
    /// Drop the decomposition loss (gamma1 = 0).
    #[arg(long)]
    pub no_pmsid: bool,
    /// Drop the shift-matched contrastive loss (gamma2 = 0).
    #[arg(long)]
    pub no_pmsim: bool,
    /// Score with the mean over branches instead of shift-weighted pooling.
    #[arg(long)]
    pub no_pmi: bool,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Raw interaction log; overrides data.input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input format; overrides data.format.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Sample store from `prepare` (default: samples.bin in the output directory).
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample store (default: samples.bin next to the checkpoint).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Sample store from `prepare` (default: samples.bin in the output directory).
    #[arg(long)]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Raw interaction log; overrides data.input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input format; overrides data.format.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Hyperparameter to vary: rho, levels, gamma1 or gamma2.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub values: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample store (default: samples.bin next to the checkpoint).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Split used for the heatmap and per-level metrics.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Maximum pairs of each kind in the distance analysis; overrides eval.max_pairs.
    #[arg(long)]
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator configuration (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Number of users; overrides n_users.
    #[arg(long)]
    pub users: Option<usize>,
    /// Number of items; overrides n_items.
    #[arg(long)]
    pub items: Option<usize>,
    /// Number of categories; overrides n_categories.
    #[arg(long)]
    pub categories: Option<usize>,
    /// Format of the written interaction log.
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: FormatArg,
}
