mod eval;
mod infer;
mod prepare;
mod synth;
mod train;

use std::path::Path;

use anyhow::{bail, Context, Result};
use mohs_core::metrics::Aggregation;
use mohs_core::pipeline::{Ensemble, PipelineConfig};
use mohs_core::tensor::ModelGraph;
use mohs_core::zoo::{load_checkpoint, ModelKind};

use crate::context::RunContext;
use crate::{AggregationArg, Command, ModelArgs, PipelineArgs};

pub fn run(command: Command, ctx: &RunContext) -> Result<()> {
    match command {
        Command::Synth(a) => synth::run(&a, ctx),
        Command::Prepare(a) => prepare::run(&a, ctx),
        Command::Train(a) => train::run(&a, ctx),
        Command::Eval(a) => eval::run(&a, ctx),
        Command::Infer(a) => infer::run(&a, ctx),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, expected: ModelKind) -> Result<ModelGraph> {
    let (graph, meta) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if meta.model.kind() != expected {
        bail!("{} holds a {} model, expected {expected}", path.display(), meta.model.kind());
    }
    Ok(graph)
}

/// Loads the given checkpoints; at least one is required.
fn load_ensemble(args: &ModelArgs, patch_size: usize) -> Result<Ensemble> {
    let load = |p: &Option<std::path::PathBuf>, k| p.as_deref().map(|p| load_model(p, k)).transpose();
    let e = Ensemble {
        artifact: load(&args.artifact, ModelKind::ArtifactSeg)?,
        tumor: load(&args.tumor, ModelKind::TumorSeg)?,
        classifier: load(&args.classifier, ModelKind::Classifier)?,
    };
    if e.artifact.is_none() && e.tumor.is_none() && e.classifier.is_none() {
        bail!("no models given: pass --artifact, --tumor and/or --classifier checkpoints");
    }
    e.check(patch_size)?;
    Ok(e)
}

fn model_inputs(args: &ModelArgs) -> Vec<&Path> {
    [&args.artifact, &args.tumor, &args.classifier].into_iter().flatten().map(|p| p.as_path()).collect()
}

fn pipeline_config(args: &PipelineArgs, ctx: &RunContext) -> Result<PipelineConfig> {
    let cfg = PipelineConfig {
        tumor_threshold: args.tumor_threshold,
        artifact_threshold: args.artifact_threshold,
        classifier_threshold: args.classifier_threshold,
        aggregation: match args.aggregation {
            AggregationArg::Max => Aggregation::Max,
            AggregationArg::TumorFraction => Aggregation::TumorFraction { threshold: args.fraction_threshold },
        },
        artifact_suppression: args.artifact_suppression,
        batch_size: args.batch_size,
        threads: ctx.threads,
        seed: ctx.seed,
        ..PipelineConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}
