use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Multiple-instance slide classification with gradient-based heat-maps.
///
/// Every option except the paths can also come from a JSON object passed
/// with `--config`, keyed by the option's field name (for example
/// `{"epochs": 20, "arch": "attention"}`). Flags win over the file, the file
/// wins over built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "milgrad", version, args_override_self = true)]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with option defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-feature synthetic dataset.
    GenData(GenDataArgs),
    /// Train a classifier from slide labels.
    Train(TrainArgs),
    /// Select slide-descriptor positions and tile features per class.
    Explain(ExplainArgs),
    /// Maximize one extractor output by gradient ascent on the tile input.
    Ascent(AscentArgs),
    /// Write feature-based and tile-score heat-maps as CSV.
    Heatmap(HeatmapArgs),
    /// Score heat-maps against tile labels and compare methods.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Minmax,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Identity,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataArgs {
    /// Number of slides [default: 200]
    #[arg(long)]
    pub slides: Option<usize>,
    /// Tiles per slide [default: 100]
    #[arg(long)]
    pub tiles: Option<usize>,
    /// Tile descriptor dimension [default: 64]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of planted signal features [default: 4]
    #[arg(long)]
    pub planted: Option<usize>,
    /// Fraction of positive tiles in a positive slide [default: 0.1]
    #[arg(long)]
    pub pos_fraction: Option<f64>,
    /// Shift added to planted features of positive tiles [default: 2.0]
    #[arg(long)]
    pub shift: Option<f64>,
    /// Standard deviation of the Gaussian noise [default: 1.0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fraction of slides held out for testing [default: 129/345]
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Root seed [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    /// Dataset directory or manifest.json
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for model.json and history.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Slide aggregator [default: minmax]
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Max and min tiles kept per slide by minmax [default: 5]
    #[arg(long)]
    pub r: Option<usize>,
    /// Hidden units of the attention scorer [default: 128]
    #[arg(long)]
    pub attention_hidden: Option<usize>,
    /// Tile feature extractor [default: identity]
    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorKind>,
    /// Hidden layer sizes of the mlp extractor, comma separated [default: 64]
    #[arg(long, value_delimiter = ',')]
    pub extractor_hidden: Option<Vec<usize>>,
    /// Descriptor size produced by the mlp extractor [default: tile dimension]
    #[arg(long)]
    pub descriptor_dim: Option<usize>,
    /// Hidden layer sizes of the decision head, comma separated [default: 200,100]
    #[arg(long, value_delimiter = ',')]
    pub decision_hidden: Option<Vec<usize>>,
    /// Training epochs [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight decay [default: 0.0001]
    #[arg(long)]
    pub l2: Option<f64>,
    /// Slides per optimizer step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer [default: adam]
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    /// Root seed [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainArgs {
    /// Dataset directory or manifest.json
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model.json
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output features.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split whose predictions are explained [default: train]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Slide-descriptor positions kept per class [default: half the slide descriptor]
    #[arg(long = "top-L")]
    pub slide_top: Option<usize>,
    /// Tile features kept per class [default: 8]
    #[arg(long = "top-l")]
    pub tile_top: Option<usize>,
    /// Contributing-tile quantile filter in [0, 1) [default: 0.9]
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Explain only this class [default: every class]
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AscentArgs {
    /// Trained model.json with an mlp extractor
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output JSON file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Descriptor feature to maximize
    #[arg(long)]
    pub feature: Option<usize>,
    /// Gradient step [default: 0.1]
    #[arg(long)]
    pub step: Option<f64>,
    /// Iteration cap [default: 512]
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Stop once a step improves the activation by less than this [default: 1e-6]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed of the random starting input [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapArgs {
    /// Dataset directory or manifest.json
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model.json
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// features.json written by `explain`
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output heatmaps.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split to map [default: test]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Class to map [default: the only class in features.json, else 1]
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    /// Dataset directory or manifest.json
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model.json; adds classification AUC and the min-score test
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// heatmaps.csv written by `heatmap`
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Output report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split the heat-maps cover [default: test]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Method the others are compared against [default: tile_score]
    #[arg(long)]
    pub baseline: Option<String>,
}
