use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mohs_core::rng::derive_seed;
use mohs_core::sampler::{read_patches_jsonl, PatchRecord};
use mohs_core::slide_io::{load_manifest, ClassHint, SlideRecord, Split};
use mohs_core::trainer::data::{artifact_seg_samples, classifier_samples, load_crop, tumor_seg_samples};
use mohs_core::trainer::{history_csv, Dataset, LoadedCrop, TrainConfig, Trainer};
use mohs_core::zoo::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ClassifierConfig, ModelKind, ModelSpec, UNetConfig,
};
use serde::Deserialize;
use serde_json::json;

use super::prepare::{patches_file, Prepared, PREPARED_FILE, SPLITS_FILE};
use super::{create_dir, write_file};
use crate::context::RunContext;
use crate::{Profile, TrainArgs};

pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Deserialize)]
struct SplitsFile {
    splits: BTreeMap<String, Split>,
}

/// Artifact-segmenter input (height, width) for whole crops.
fn artifact_input(profile: Profile) -> (usize, usize) {
    match profile {
        Profile::Desk => (256, 512),
        Profile::Full => (512, 1024),
    }
}

fn fresh_model(kind: ModelKind, profile: Profile, seed: u64) -> ModelSpec {
    let seed = derive_seed(seed, &format!("init/{kind}"));
    let patch = mohs_core::sampler::PATCH_SIZE;
    let unet = |h, w| match profile {
        Profile::Desk => UNetConfig::desk(h, w, seed),
        Profile::Full => UNetConfig::full(h, w, seed),
    };
    match kind {
        ModelKind::ArtifactSeg => {
            let (h, w) = artifact_input(profile);
            ModelSpec::Unet { kind, config: unet(h, w) }
        }
        ModelKind::TumorSeg => ModelSpec::Unet { kind, config: unet(patch, patch) },
        ModelKind::Classifier => ModelSpec::Classifier {
            config: match profile {
                Profile::Desk => ClassifierConfig::desk(seed),
                Profile::Full => ClassifierConfig::full(seed),
            },
        },
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Patch records of one split that feed `kind`. Tumor-seg keeps every
/// patch of tumor crops plus a seeded share of artifact-crop patches as
/// negatives.
fn select_patches(
    kind: ModelKind,
    patches: Vec<PatchRecord>,
    hints: &BTreeMap<&str, ClassHint>,
    negative_rate: f64,
    seed: u64,
) -> Vec<PatchRecord> {
    match kind {
        ModelKind::TumorSeg => patches
            .into_iter()
            .filter(|p| match hints.get(p.slide_id.as_str()) {
                Some(ClassHint::Tumor) => true,
                Some(ClassHint::Artifact) => {
                    let u = derive_seed(seed, &format!("negatives/{}/{}/{}", p.slide_id, p.x, p.y));
                    (u as f64 / u64::MAX as f64) < negative_rate
                }
                None => false,
            })
            .collect(),
        _ => patches,
    }
}

fn load_crops<'a>(records: impl Iterator<Item = &'a SlideRecord>) -> Result<Vec<LoadedCrop>> {
    records.map(|r| load_crop(r).with_context(|| format!("loading crop {}", r.id))).collect()
}

fn build_split(
    kind: ModelKind,
    split: Split,
    data_dir: &Path,
    records: &[SlideRecord],
    args: &TrainArgs,
    profile: Profile,
    seed: u64,
) -> Result<Dataset> {
    let in_split = records.iter().filter(|r| r.split == split);
    if kind == ModelKind::ArtifactSeg {
        let crops = load_crops(in_split)?;
        let (h, w) = artifact_input(profile);
        return Ok(artifact_seg_samples(&crops, h, w)?);
    }
    let hints: BTreeMap<&str, ClassHint> =
        records.iter().filter(|r| r.split == split).map(|r| (r.id.as_str(), r.class_hint)).collect();
    let path = data_dir.join(patches_file(split));
    let all = read_patches_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    let patches = select_patches(kind, all, &hints, args.negative_rate, seed);
    let needed: BTreeSet<&str> = patches.iter().map(|p| p.slide_id.as_str()).collect();
    let crops = load_crops(in_split.filter(|r| needed.contains(r.id.as_str())))?;
    Ok(match kind {
        ModelKind::TumorSeg => tumor_seg_samples(&crops, &patches)?,
        _ => classifier_samples(&crops, &patches)?,
    })
}

/// History rows already on disk up to `epoch`, without the header.
fn earlier_history(path: &Path, epoch: usize) -> Result<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(String::new());
    };
    let mut kept = String::new();
    for line in text.lines().skip(1) {
        let e: usize = line.split(',').next().unwrap_or("").parse().context("malformed history row")?;
        if e <= epoch {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn run(args: &TrainArgs, ctx: &RunContext) -> Result<()> {
    if !(0.0..=1.0).contains(&args.negative_rate) {
        bail!("--negative-rate must lie in [0, 1]");
    }
    let kind = args.model;
    let prepared: Prepared = read_json(&args.data.join(PREPARED_FILE))?;
    let splits: SplitsFile = read_json(&args.data.join(SPLITS_FILE))?;
    let mut records = load_manifest(&prepared.manifest)?;
    for r in &mut records {
        r.split = splits.splits.get(&r.id).copied().unwrap_or_default();
    }

    let (graph, meta) = match &args.resume {
        Some(path) => {
            let (g, m) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if m.model.kind() != kind {
                bail!("{} holds a {} model, not {kind}", path.display(), m.model.kind());
            }
            (g, m)
        }
        None => {
            let spec = fresh_model(kind, ctx.profile, ctx.seed);
            (spec.build()?, CheckpointMeta::new(spec))
        }
    };
    let start_epoch = meta.epoch;

    let train_set = build_split(kind, Split::Train, &args.data, &records, args, ctx.profile, ctx.seed)?;
    let val_set = build_split(kind, Split::Val, &args.data, &records, args, ctx.profile, ctx.seed)?;
    eprintln!(
        "{kind}: {} train / {} val samples, epochs {}..{}",
        train_set.len(),
        val_set.len(),
        start_epoch + 1,
        args.epochs
    );

    let mut cfg = TrainConfig::new(args.batch_size, args.epochs, derive_seed(ctx.seed, &format!("train/{kind}")));
    cfg.plateau.initial_lr = args.lr;
    cfg.augment = !args.no_augment;
    let mut trainer = Trainer::new(graph, meta, &train_set, &val_set, cfg)?;
    let mut aborted = None;
    while trainer.epochs_done() < args.epochs {
        let t0 = Instant::now();
        match trainer.step_epoch()? {
            Ok(s) => eprintln!(
                "epoch {:>3}  loss {:.5}  val {:.4}  lr {:e}{}  ({:.1} s)",
                s.row.epoch,
                s.row.train_loss,
                s.row.val_metric,
                s.row.lr,
                if s.improved { "  *" } else { "" },
                t0.elapsed().as_secs_f64()
            ),
            Err(diag) => {
                aborted = Some(diag);
                break;
            }
        }
    }
    let outcome = trainer.finish(aborted);

    create_dir(&args.out)?;
    if let Some((g, m)) = &outcome.best {
        save_checkpoint(g, m, &args.out.join(BEST_FILE))?;
    }
    save_checkpoint(&outcome.last.0, &outcome.last.1, &args.out.join(LAST_FILE))?;
    let history_path = args.out.join(HISTORY_FILE);
    let earlier = match &args.resume {
        Some(_) => earlier_history(&history_path, start_epoch)?,
        None => String::new(),
    };
    let fresh = history_csv(&outcome.history);
    let (header, rows) = fresh.split_once('\n').unwrap_or((&fresh, ""));
    write_file(&history_path, format!("{header}\n{earlier}{rows}"))?;

    let data_inputs = [args.data.join(PREPARED_FILE), args.data.join(SPLITS_FILE), prepared.manifest.clone()];
    let mut inputs: Vec<&Path> = data_inputs.iter().map(|p| p.as_path()).collect();
    if let Some(p) = &args.resume {
        inputs.push(p);
    }
    ctx.write_manifest(
        &args.out,
        "train",
        &inputs,
        json!({
            "model": kind,
            "start_epoch": start_epoch,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "negative_rate": args.negative_rate,
            "augment": !args.no_augment,
            "train_samples": train_set.len(),
            "val_samples": val_set.len(),
            "best_metric": outcome.last.1.best_metric,
            "aborted": outcome.aborted,
        }),
    )?;
    if let Some(diag) = outcome.aborted {
        bail!("training aborted: {diag}");
    }
    match outcome.last.1.best_metric {
        Some(b) => println!("{kind}: {} epochs, best val {b:.4}", outcome.last.1.epoch),
        None => println!("{kind}: {} epochs", outcome.last.1.epoch),
    }
    Ok(())
}
