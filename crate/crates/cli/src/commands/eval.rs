use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use mohs_core::pipeline::{evaluate_split, ModelChoice};
use mohs_core::slide_io::{load_manifest, Split};
use serde::Deserialize;
use serde_json::json;

use super::{create_dir, load_ensemble, model_inputs, pipeline_config, write_file};
use crate::context::RunContext;
use crate::EvalArgs;

pub const REPORT_FILE: &str = "report.json";
pub const SLIDES_FILE: &str = "slides.json";

#[derive(Deserialize)]
struct SplitsFile {
    splits: BTreeMap<String, Split>,
}

fn parse_split(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

pub fn run(args: &EvalArgs, ctx: &RunContext) -> Result<()> {
    let cfg = pipeline_config(&args.pipeline, ctx)?;
    let mut records = load_manifest(&args.manifest)?;
    if let Some(path) = &args.splits {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: SplitsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let wanted = parse_split(&args.split);
        records.retain(|r| s.splits.get(&r.id) == Some(&wanted));
    }
    if records.is_empty() {
        bail!("no records to evaluate");
    }
    let ensemble;
    let choice = if args.oracle {
        ModelChoice::Oracle { inverted: false }
    } else if args.anti_oracle {
        ModelChoice::Oracle { inverted: true }
    } else {
        ensemble = load_ensemble(&args.models, cfg.patch_size)?;
        ModelChoice::Trained(&ensemble)
    };
    let evaluation = evaluate_split(&records, choice, &cfg)?;

    create_dir(&args.out)?;
    write_file(&args.out.join(REPORT_FILE), serde_json::to_string_pretty(&evaluation.report)? + "\n")?;
    write_file(&args.out.join(SLIDES_FILE), serde_json::to_string_pretty(&evaluation.slides)? + "\n")?;
    for (name, curve) in &evaluation.curves {
        write_file(&args.out.join(format!("roc-{name}.csv")), curve.to_csv())?;
    }
    let mut inputs = vec![args.manifest.as_path()];
    inputs.extend(args.splits.as_deref());
    inputs.extend(model_inputs(&args.models));
    ctx.write_manifest(
        &args.out,
        "eval",
        &inputs,
        json!({
            "split": args.splits.as_ref().map(|_| args.split.as_str()),
            "records": records.len(),
            "oracle": args.oracle,
            "anti_oracle": args.anti_oracle,
            "pipeline": cfg,
        }),
    )?;

    let r = &evaluation.report;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    if let Some(s) = &r.tumor_seg {
        println!("tumor-seg     dice {:.4}  pixel auc {}", s.dice, fmt(s.pixel_auc));
    }
    if let Some(s) = &r.artifact_seg {
        println!("artifact-seg  dice {:.4}  pixel auc {}", s.dice, fmt(s.pixel_auc));
    }
    if let Some(s) = &r.patch_cls {
        println!("patch         auc {}  n {}", fmt(s.auc), s.samples);
    }
    if let Some(s) = &r.slide_cls {
        println!("slide         auc {}  n {}", fmt(s.auc), s.samples);
    }
    Ok(())
}
