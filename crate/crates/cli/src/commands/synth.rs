use anyhow::{bail, Result};
use mohs_core::synthgen::{generate_dataset, DatasetSpec};
use serde_json::json;

use super::create_dir;
use crate::context::RunContext;
use crate::SynthArgs;

pub fn run(args: &SynthArgs, ctx: &RunContext) -> Result<()> {
    if !(0.0..=1.0).contains(&args.tumor_share) {
        bail!("--tumor-share must lie in [0, 1]");
    }
    create_dir(&args.out)?;
    let spec = DatasetSpec {
        mix: (1.0 - args.tumor_share, args.tumor_share),
        width: args.width,
        height: args.height,
        ..DatasetSpec::new(args.n, ctx.seed)
    };
    let records = generate_dataset(&spec, &args.out)?;
    let (artifact, tumor) = spec.counts();
    ctx.write_manifest(&args.out, "synth", &[], json!({ "dataset": spec, "crops": records.len() }))?;
    println!("wrote {} crops ({artifact} artifact, {tumor} tumor) to {}", records.len(), args.out.display());
    Ok(())
}
