use std::collections::{BTreeMap, HashMap};

use anyhow::{bail, Context, Result};
use mohs_core::sampler::{split_dataset, write_patches_jsonl, PatchRecord};
use mohs_core::slide_io::{load_manifest, Split};
use mohs_core::trainer::data::{crop_patches, load_crop};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{create_dir, write_file};
use crate::context::RunContext;
use crate::PrepareArgs;

pub const SPLITS_FILE: &str = "splits.json";
pub const PREPARED_FILE: &str = "prepared.json";

pub fn patches_file(split: Split) -> String {
    format!("patches-{split}.jsonl")
}

/// Index of a prepared directory, read back by `train`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Prepared {
    pub manifest: std::path::PathBuf,
    pub seed: u64,
    pub exclusion_rate: f64,
    /// Crops per split.
    pub crops: BTreeMap<String, usize>,
    /// Patch records per split.
    pub patches: BTreeMap<String, usize>,
}

pub fn run(args: &PrepareArgs, ctx: &RunContext) -> Result<()> {
    if !(0.0..=1.0).contains(&args.exclusion_rate) {
        bail!("--exclusion-rate must lie in [0, 1]");
    }
    let mut records = load_manifest(&args.manifest)?;
    if records.is_empty() {
        bail!("{} lists no crops", args.manifest.display());
    }
    let assignment = split_dataset(&records, args.fractions, ctx.seed, args.by_patient)?;
    assignment.apply(&mut records);
    let (tr, va, te) = assignment.counts();

    create_dir(&args.out)?;
    let mut per_split: HashMap<Split, Vec<PatchRecord>> = HashMap::new();
    for r in &records {
        let crop = load_crop(r)?;
        let patches = crop_patches(&crop, args.exclusion_rate, ctx.seed)?;
        per_split.entry(r.split).or_default().extend(patches);
    }
    let mut patch_counts = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let patches = per_split.remove(&split).unwrap_or_default();
        let path = args.out.join(patches_file(split));
        write_patches_jsonl(&path, &patches).with_context(|| format!("writing {}", path.display()))?;
        patch_counts.insert(split.to_string(), patches.len());
    }
    write_file(&args.out.join(SPLITS_FILE), serde_json::to_string_pretty(&assignment)? + "\n")?;
    let manifest = std::fs::canonicalize(&args.manifest)?;
    let prepared = Prepared {
        manifest,
        seed: ctx.seed,
        exclusion_rate: args.exclusion_rate,
        crops: BTreeMap::from([("train".into(), tr), ("val".into(), va), ("test".into(), te)]),
        patches: patch_counts.clone(),
    };
    write_file(&args.out.join(PREPARED_FILE), serde_json::to_string_pretty(&prepared)? + "\n")?;
    ctx.write_manifest(
        &args.out,
        "prepare",
        &[&args.manifest],
        json!({ "fractions": args.fractions, "by_patient": args.by_patient, "exclusion_rate": args.exclusion_rate }),
    )?;
    println!("split train={tr} val={va} test={te}");
    println!("patches train={} val={} test={}", patch_counts["train"], patch_counts["val"], patch_counts["test"]);
    Ok(())
}
