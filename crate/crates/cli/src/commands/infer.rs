use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mohs_core::pipeline::{analysis_rgb, analyze, render_overlay, OracleModels, SlideModels, SlideSource};
use mohs_core::slide_io::{downscale_mask2x, read_masks, read_rgb, MaskPair, TiledSlide, MTS_MAGIC};
use serde_json::json;

use super::{create_dir, load_ensemble, model_inputs, pipeline_config, write_file};
use crate::context::RunContext;
use crate::InferArgs;

pub const OVERLAY_FILE: &str = "overlay.png";
pub const SUMMARY_FILE: &str = "summary.json";

fn is_tiled(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 4];
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(f.read_exact(&mut magic).is_ok() && &magic == MTS_MAGIC)
}

pub fn run(args: &InferArgs, ctx: &RunContext) -> Result<()> {
    if !(0.0..=1.0).contains(&args.alpha) {
        bail!("--alpha must lie in [0, 1]");
    }
    let cfg = pipeline_config(&args.pipeline, ctx)?;
    let id = match &args.id {
        Some(id) => id.clone(),
        None => args.slide.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "slide".into()),
    };
    let source: Box<dyn SlideSource> = if is_tiled(&args.slide)? {
        Box::new(TiledSlide::open(&args.slide, args.tile_budget)?)
    } else {
        Box::new(read_rgb(&args.slide)?)
    };
    let (width, height) = source.dims();
    let models: Box<dyn SlideModels> = match &args.oracle_masks {
        Some(path) => {
            let m = read_masks(path)?;
            if (m.tumor.width, m.tumor.height) != (width, height) {
                bail!("{} does not match the slide size {width}x{height}", path.display());
            }
            Box::new(OracleModels {
                truth: MaskPair { tumor: downscale_mask2x(&m.tumor)?, artifact: downscale_mask2x(&m.artifact)? },
                inverted: false,
            })
        }
        None => Box::new(load_ensemble(&args.models, cfg.patch_size)?),
    };
    let analysis = analyze(&id, source.as_ref(), models.as_ref(), &cfg)?;
    let base = analysis_rgb(source.as_ref())?;
    let overlay = render_overlay(&analysis, &base, args.alpha, &cfg)?;

    create_dir(&args.out)?;
    let overlay_path = args.out.join(OVERLAY_FILE);
    overlay.save(&overlay_path).with_context(|| format!("writing {}", overlay_path.display()))?;
    let summary = analysis.summary();
    write_file(&args.out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut inputs = vec![args.slide.as_path()];
    inputs.extend(args.oracle_masks.as_deref());
    inputs.extend(model_inputs(&args.models));
    ctx.write_manifest(
        &args.out,
        "infer",
        &inputs,
        json!({ "slide_id": id, "alpha": args.alpha, "tile_budget": args.tile_budget, "pipeline": cfg }),
    )?;
    println!(
        "{id}: {:?}, score {}, {} patches ({} tissue)",
        summary.verdict,
        summary.score.map_or("n/a".into(), |s| format!("{s:.4}")),
        summary.patch_count,
        summary.tissue_patch_count
    );
    Ok(())
}
