//! The flag surface of the `vanillanet` binary.
//!
//! Every value-carrying flag is optional at parse time so that a config
//! file can fill the gaps; resolution order is built-in default, then
//! config file, then explicit flag (see [`crate::config`]). Boolean flags
//! that need all three states take an optional value: `--reduced-pool`
//! means true, `--reduced-pool false` forces it off, absence defers.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use vanillanet::arch::ShortcutMode;
use vanillanet::ops::LossKind;
use vanillanet::train::OptimizerKind;
use vanillanet::{Error, Result};

/// Train, collapse, check, and measure plain shortcut-free conv nets.
#[derive(Debug, Parser)]
#[command(name = "vanillanet", version, about, max_term_width = 100)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub cmd: Cmd,
}

/// Flags every subcommand honors.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Base seed for every random choice: initialization, generated data,
    /// shuffling, verification probes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Tensor element type, f32 or f64. Checkpoint commands must match the
    /// type the file was written with.
    #[arg(long, global = true)]
    pub dtype: Option<Dtype>,

    /// Demand a bit-reproducible run. Compute here is single-threaded and
    /// already deterministic; the flag additionally disables batch
    /// prefetching and is echoed into manifests and reports.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// TOML config file with optional `seed`/`dtype` keys and `[arch]`,
    /// `[train]`, `[data]` sections; explicit flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a network; writes a checkpoint and a run manifest.
    Train(TrainArgs),
    /// Collapse a trained checkpoint into its deployment form.
    Fuse(FuseArgs),
    /// Check a trained checkpoint against its collapsed form numerically.
    Verify(VerifyArgs),
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Forward-pass latency of a checkpoint or a freshly built network.
    Bench(BenchArgs),
    /// Parameter and FLOP accounting for an architecture.
    Count(CountArgs),
    /// Bundle a run directory's manifest and reports into one document.
    ExportReport(ExportArgs),
}

/// Architecture selection, shared by `train`, `bench`, and `count`.
#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Deployed conv depth, 5..=13.
    #[arg(long)]
    pub variant: Option<u8>,

    /// Channel multiplier on the reference widths (results round to
    /// multiples of 8).
    #[arg(long)]
    pub width_scale: Option<f64>,

    /// Series-activation window radius n; 0 leaves a plain shifted ReLU.
    #[arg(long)]
    pub series_n: Option<usize>,

    /// Square input edge. Training infers it from the data; counting and
    /// benchmarking default to 224.
    #[arg(long)]
    pub input_size: Option<usize>,

    /// Input channels (training infers this from the data).
    #[arg(long)]
    pub in_channels: Option<usize>,

    /// Class count (training infers this from the data).
    #[arg(long)]
    pub classes: Option<usize>,

    /// Parameter-free shortcut ablation: none, before_act, after_act.
    #[arg(long)]
    pub shortcut: Option<ShortcutMode>,

    /// Skip the last stage pool so 32-pixel inputs keep a 2x2 final map
    /// (required input divisor drops from 32 to 16). Training defaults
    /// this on for inputs at desk scale.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub reduced_pool: Option<bool>,

    /// Train each conv as a collapsible dual block. `--deep-train false`
    /// is the shallow ablation baseline that trains at deployed depth.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub deep_train: Option<bool>,
}

/// Dataset selection, shared by `train` and `eval`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Source: synthetic | digits | markers | idx | cifar.
    #[arg(long)]
    pub data: Option<SourceKind>,

    /// Sample count for the generated sources.
    #[arg(long)]
    pub samples: Option<usize>,

    /// IDX image file (pairs with --labels).
    #[arg(long, value_name = "FILE")]
    pub images: Option<PathBuf>,

    /// IDX label file.
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,

    /// CIFAR-10 binary batch files.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    pub files: Vec<PathBuf>,

    /// Standardize every channel to zero mean, unit variance before use.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub standardize: Option<bool>,
}

/// Training-loop knobs; defaults live in the core training module.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Epochs until the blend activation reaches identity and the extra
    /// depth becomes removable (default: a third of the run).
    #[arg(long)]
    pub deep_epochs: Option<usize>,

    /// Linear warmup length before the cosine decay.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,

    #[arg(long)]
    pub base_lr: Option<f64>,

    #[arg(long)]
    pub weight_decay: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// adamw or sgd.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,

    /// Momentum for --optimizer sgd.
    #[arg(long)]
    pub momentum: Option<f64>,

    /// ce or bce.
    #[arg(long)]
    pub loss: Option<LossKind>,

    #[arg(long)]
    pub label_smoothing: Option<f64>,

    /// Horizontal-flip probability during training.
    #[arg(long)]
    pub flip_prob: Option<f64>,

    /// Random-crop padding in pixels; 0 disables cropping.
    #[arg(long)]
    pub crop_padding: Option<usize>,

    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub shuffle: Option<bool>,

    /// Batches decoded ahead of the compute thread; 0 decodes inline.
    #[arg(long)]
    pub prefetch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,

    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub train: TrainFlags,

    /// Output directory for the checkpoint and manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Trained checkpoint to collapse.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// Where to write the deployment checkpoint.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Where to write the fusion report (default: --out with a
    /// `.report.json` extension).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,

    /// Verification probe count; 0 skips numerical verification.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,

    /// Max-abs logit deviation allowed between the two forms
    /// (default: 1e-5 for f32, 1e-10 for f64).
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Trained checkpoint to check.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// Verification probe count.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,

    /// Max-abs logit deviation allowed (default: 1e-5 for f32, 1e-10
    /// for f64).
    #[arg(long)]
    pub tolerance: Option<f64>,

    /// Print the full report as JSON instead of a summary.
    #[arg(long)]
    pub json: bool,

    /// Also write the report to a file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,

    /// Loss to report, ce or bce (default ce, no smoothing).
    #[arg(long)]
    pub loss: Option<LossKind>,

    #[arg(long)]
    pub label_smoothing: Option<f64>,

    /// Print the full result as JSON instead of a summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to measure; without it a fresh network is built from
    /// the architecture flags.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,

    #[command(flatten)]
    pub arch: ArchArgs,

    #[arg(long, default_value_t = 1)]
    pub batch: usize,

    /// Timed iterations.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,

    /// Untimed warmup iterations discarded before measuring.
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,

    /// Measure the collapsed deployment form (a training checkpoint is
    /// fused first, which requires its blend to be at identity).
    #[arg(long)]
    pub fused: bool,

    /// Print the full report as JSON instead of a summary.
    #[arg(long)]
    pub json: bool,

    /// Also write the report to a file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub arch: ArchArgs,

    /// Count the training-mode graph instead of the deployment graph.
    #[arg(long)]
    pub train_mode: bool,

    /// Print the full table as JSON instead of human-readable text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory holding manifest.json and report files.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,

    /// Output file (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Element type selector shared by every command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    /// Default max-abs logit deviation accepted when verifying a fusion.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Dtype::F32 => 1e-5,
            Dtype::F64 => 1e-10,
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::invalid(format!(
                "unknown dtype `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where training or evaluation samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Generated class-conditional Gaussian blobs (RGB, any square size).
    Synthetic,
    /// Generated digit glyphs in the 28x28 single-channel layout.
    Digits,
    /// Generated two-marker direction task in the 32x32 RGB layout.
    Markers,
    /// An IDX image/label file pair.
    Idx,
    /// CIFAR-10 binary batch files.
    Cifar,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Synthetic => "synthetic",
            SourceKind::Digits => "digits",
            SourceKind::Markers => "markers",
            SourceKind::Idx => "idx",
            SourceKind::Cifar => "cifar",
        }
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" | "blobs" => Ok(SourceKind::Synthetic),
            "digits" => Ok(SourceKind::Digits),
            "markers" => Ok(SourceKind::Markers),
            "idx" => Ok(SourceKind::Idx),
            "cifar" | "cifar10" => Ok(SourceKind::Cifar),
            other => Err(Error::invalid(format!(
                "unknown data source `{other}` (expected synthetic, digits, markers, idx, or cifar)"
            ))),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn flag_surface_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn dtype_and_source_parse() {
        assert_eq!("f64".parse::<Dtype>().unwrap(), Dtype::F64);
        assert!("f16".parse::<Dtype>().is_err());
        assert_eq!("blobs".parse::<SourceKind>().unwrap(), SourceKind::Synthetic);
        assert_eq!("cifar10".parse::<SourceKind>().unwrap(), SourceKind::Cifar);
        assert!("imagenet".parse::<SourceKind>().is_err());
    }

    #[test]
    fn optional_bools_take_three_states() {
        let cli = Cli::try_parse_from(["vanillanet", "count", "--reduced-pool"]).unwrap();
        let Cmd::Count(args) = cli.cmd else { panic!() };
        assert_eq!(args.arch.reduced_pool, Some(true));

        let cli =
            Cli::try_parse_from(["vanillanet", "count", "--reduced-pool", "false"]).unwrap();
        let Cmd::Count(args) = cli.cmd else { panic!() };
        assert_eq!(args.arch.reduced_pool, Some(false));

        let cli = Cli::try_parse_from(["vanillanet", "count"]).unwrap();
        let Cmd::Count(args) = cli.cmd else { panic!() };
        assert_eq!(args.arch.reduced_pool, None);
    }
}
