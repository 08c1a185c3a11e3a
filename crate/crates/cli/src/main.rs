//! `ltcx`: synthetic data, three-branch training, ensembling, evaluation and
//! Grad-CAM from the command line.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 numerical failure
//! during training.

mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltcx_core::datakit::{Attribute, Split};
use ltcx_core::imbalance::ResampleKind;
use ltcx_core::training::TrainError;
use ltcx_core::Branch;

#[derive(Parser)]
#[command(name = "ltcx", version, about = "Long-tailed multi-label chest X-ray pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the manifest and its images live, and how classes are partitioned.
#[derive(Args, Clone)]
pub struct DataArgs {
    /// Manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Image store resolving `store:` references.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Base directory for PNG references (defaults to the manifest's directory).
    #[arg(long)]
    image_dir: Option<PathBuf>,
    /// Class shared by the Head and Tail branches.
    #[arg(long, default_value = "Support Devices")]
    support_device: String,
    /// Number of Head classes (default ⌈9C/19⌉).
    #[arg(long)]
    head_size: Option<usize>,
}

/// Training configuration file plus per-key overrides.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TrainConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.kind=focal`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset (manifest.csv + images.bin).
    Synth {
        /// SynthConfig JSON; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one branch and write its best-validation checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "all")]
        branch: Branch,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-sample the training split (cRT subsampling or random oversampling).
    Resample {
        #[arg(long)]
        manifest: PathBuf,
        /// ResampleSpec JSON; the flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ResampleKind>,
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Second cRT stage: retrain the decoder on several re-sampled manifests.
    Crt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0.7)]
        factor: f64,
        /// Seed of the first re-sampling; run i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write branch prediction CSV for one checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine three branch prediction CSVs into final scores.
    Combine {
        #[arg(long)]
        all: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        tail: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints (or a score CSV) and write report, curves and plots.
    Eval {
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Score CSV over all classes instead of checkpoints.
        #[arg(long, conflicts_with = "checkpoints")]
        scores: Option<PathBuf>,
        /// Combine Head, Tail and All checkpoints before scoring.
        #[arg(long)]
        ensemble: bool,
        /// Fairness attribute (race or gender); repeatable.
        #[arg(long)]
        fairness: Vec<Attribute>,
        /// `youden` or a fixed probability.
        #[arg(long, default_value = "0.5")]
        f1_threshold: String,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM overlay PNG for one sample and class.
    Gradcam {
        checkpoint: PathBuf,
        sample_id: String,
        /// Class name or global class index.
        class: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<ResampleKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown resampling kind `{s}`"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => commands::synth(config, seed, &out),
        Command::Train { data, config, branch, out } => commands::train(&data, &config, branch, &out),
        Command::Resample { manifest, spec, kind, factor, threshold, seed, out } => {
            commands::resample(&manifest, spec, kind, factor, threshold, seed, &out)
        }
        Command::Crt { checkpoint, data, config, count, factor, seed, out } => {
            commands::crt(&checkpoint, &data, &config, count, factor, seed, &out)
        }
        Command::Predict { checkpoint, data, split, out } => commands::predict(&checkpoint, &data, split, &out),
        Command::Combine { all, head, tail, data, out } => commands::combine(&all, &head, &tail, &data, &out),
        Command::Eval { checkpoints, data, scores, ensemble, fairness, f1_threshold, split, out } => commands::eval(
            commands::EvalArgs { checkpoints, scores, ensemble, fairness, f1_threshold, split },
            &data,
            &out,
        ),
        Command::Gradcam { checkpoint, sample_id, class, data, alpha, out } => {
            commands::gradcam(&checkpoint, &sample_id, &class, &data, alpha, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}
