//! Flag definitions for the `grm` binary.
//!
//! Every tunable is optional at the flag level: resolution order is flag,
//! then `--config` file entry (same key as the long flag name), then the
//! built-in default. Required paths (`--out`, `--data`, …) have no file
//! fallback.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "grm",
    version,
    about = "Metric-learning workbench with covariance-driven gradient rectification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic place-retrieval dataset.
    GenData(GenDataArgs),
    /// Train an encoder; writes checkpoint, epoch log, and manifest.
    Train(TrainArgs),
    /// Compute recall of a checkpoint over a dataset's held-out queries.
    Eval(EvalArgs),
    /// Emit descriptor/gradient spectrum and alignment CSVs.
    Diagnose(DiagnoseArgs),
}

// ───────────────────────────── enum flags ──────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum EstimatorArg {
    /// FIFO window of recent descriptors.
    Queue,
    /// Running average over everything seen.
    Avg,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum LossArg {
    Contrastive,
    Triplet,
    Prototype,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

// ───────────────────────────── subcommands ─────────────────────────────

#[derive(Args)]
pub struct GenDataArgs {
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` defaults file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of places.
    #[arg(long)]
    pub places: Option<usize>,
    /// Samples per place; a quarter become held-out queries.
    #[arg(long)]
    pub per_place: Option<usize>,
    /// Input dimensionality.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Largest-to-smallest center variance ratio (>= 1).
    #[arg(long)]
    pub anisotropy: Option<f64>,
    /// Within-place jitter on the leading axis.
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Jitter multiplier for the query capture pass.
    #[arg(long)]
    pub query_noise_factor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file from `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoint, log CSV, and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `key=value` defaults file (a previous run's manifest works); flags
    /// take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss; `prototype` switches to the classification preset.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Margin for the pairwise losses.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Softmax sharpness for the prototype loss.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Hidden and output widths after the input layer, e.g. `64,32`.
    #[arg(long)]
    pub layers: Option<String>,
    /// Gradient rectification on or off.
    #[arg(long, value_enum)]
    pub grm: Option<Switch>,
    /// Rectification rate `s` (0 = identity, 0.5 = square root, 1 = linear).
    #[arg(long)]
    pub s: Option<f64>,
    /// Covariance estimator feeding the projection.
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,
    /// Descriptor window size for the queue estimator.
    #[arg(long)]
    pub queue_size: Option<usize>,
    /// Diagonal added to covariance estimates.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Rebuild the projection every this many steps.
    #[arg(long)]
    pub refresh: Option<u64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate multiplier applied every `--decay-every` epochs.
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Anchors per pairwise batch.
    #[arg(long)]
    pub queries_per_batch: Option<usize>,
    /// Negatives sampled per anchor.
    #[arg(long)]
    pub negatives_per_query: Option<usize>,
    /// Batch size for the prototype loss.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// L2-normalize descriptors inside the loss.
    #[arg(long, value_enum)]
    pub normalize: Option<Switch>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write per-epoch spectrum and eigenbasis CSVs for `diagnose --log-dir`.
    #[arg(long)]
    pub dump_spectra: bool,
    /// Export the final memory-queue contents as a descriptor dump.
    #[arg(long)]
    pub dump_queue: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Encoder checkpoint from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file from `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV (`n,recall` per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated recall depths.
    #[arg(long, default_value = "1,5,10")]
    pub n: String,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    /// Directory for the emitted CSVs.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// First checkpoint (checkpoint mode).
    #[arg(long)]
    pub checkpoint_a: Option<PathBuf>,
    /// Second checkpoint; gradients are surveyed under this one.
    #[arg(long)]
    pub checkpoint_b: Option<PathBuf>,
    /// Dataset file (checkpoint mode).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training output directory with `--dump-spectra` snapshots (log mode).
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Snapshot epoch for side A (log mode); defaults to the first.
    #[arg(long)]
    pub epoch_a: Option<usize>,
    /// Snapshot epoch for side B (log mode); defaults to the last.
    #[arg(long)]
    pub epoch_b: Option<usize>,
    /// Seed for the gradient survey's batch sampling.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Margin for the survey's contrastive loss.
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// Anchors per surveyed batch.
    #[arg(long, default_value_t = 16)]
    pub queries_per_batch: usize,
    /// Negatives per anchor in the survey.
    #[arg(long, default_value_t = 5)]
    pub negatives_per_query: usize,
}
