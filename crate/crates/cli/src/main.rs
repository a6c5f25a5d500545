//! `mohs`: synthetic data, training, evaluation and slide inference.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mohs_core::zoo::ModelKind;

use crate::context::RunContext;

#[derive(Debug, Parser)]
#[command(name = "mohs", version, about = "Tumor and artifact detection on Mohs slide images")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// key=value file; any long flag may be given as `flag = value`.
    /// Flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step. Falls back to MOHS_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for inference.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    /// Force single-threaded numerics.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Model scale and image sizes.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Narrow networks that train on one CPU core.
    Desk,
    /// Full-width residual encoders.
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crop dataset with manifest.
    Synth(SynthArgs),
    /// Split a manifest and extract patch records per split.
    Prepare(PrepareArgs),
    /// Train one network of the ensemble.
    Train(TrainArgs),
    /// Score models on a labelled split.
    Eval(EvalArgs),
    /// Analyze one slide and render an overlay.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of crops.
    #[arg(long)]
    pub n: usize,
    /// Share of tumor crops; the rest carry artifacts.
    #[arg(long, default_value_t = 0.12)]
    pub tumor_share: f64,
    /// Crop width in pixels (stored resolution).
    #[arg(long, default_value_t = 2048)]
    pub width: usize,
    #[arg(long, default_value_t = 1024)]
    pub height: usize,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability of dropping a non-tissue patch.
    #[arg(long, default_value_t = mohs_core::trainer::data::DEFAULT_EXCLUSION_RATE)]
    pub exclusion_rate: f64,
    /// train,val,test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_fractions)]
    pub fractions: (f64, f64, f64),
    /// Keep all crops of a patient in one split.
    #[arg(long)]
    pub by_patient: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// artifact-seg, tumor-seg or classifier.
    #[arg(long)]
    pub model: ModelKind,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Total epochs, counted across resumes.
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Share of artifact-crop patches used as tumor-seg negatives.
    #[arg(long, default_value_t = 0.25)]
    pub negative_rate: f64,
    /// Disable rotation, flip and zoom augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_name = "CKPT")]
    pub artifact: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub tumor: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = 0.5)]
    pub tumor_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub artifact_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub classifier_threshold: f64,
    /// Slide score rule.
    #[arg(long, value_enum, default_value_t = AggregationArg::Max)]
    pub aggregation: AggregationArg,
    /// Patch-probability cut for the tumor-fraction rule.
    #[arg(long, default_value_t = 0.5)]
    pub fraction_threshold: f64,
    /// Drop patches whose artifact fraction exceeds this value.
    #[arg(long)]
    pub artifact_suppression: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Max,
    TumorFraction,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split assignment written by `prepare`; without it every record is used.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Ground-truth stub models.
    #[arg(long, conflicts_with_all = ["artifact", "tumor", "classifier", "anti_oracle"])]
    pub oracle: bool,
    /// Inverted ground-truth stubs.
    #[arg(long, conflicts_with_all = ["artifact", "tumor", "classifier"])]
    pub anti_oracle: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// PNG image or tiled MTS1 slide.
    #[arg(long)]
    pub slide: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Slide id in the summary; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Annotation image to drive ground-truth stub models.
    #[arg(long, value_name = "PNG", conflicts_with_all = ["artifact", "tumor", "classifier"])]
    pub oracle_masks: Option<PathBuf>,
    /// Overlay opacity.
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Tiles held in memory for MTS1 slides.
    #[arg(long, default_value_t = 64)]
    pub tile_budget: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] if [a, b, c].iter().all(|f| (0.0..=1.0).contains(f)) && (a + b + c - 1.0).abs() < 1e-9 => {
            Ok((a, b, c))
        }
        _ => Err("expected three fractions in [0, 1] summing to 1, e.g. 0.7,0.15,0.15".into()),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let ctx = RunContext::new(&cli, &argv);
    if let Some(msg) = &ctx.env_seed_error {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
