use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mohs_core::util::sha256_file;
use serde::Serialize;

use crate::{Cli, Profile};

pub const SEED_ENV: &str = "MOHS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Env,
    Default,
}

/// Settings shared by every command, resolved once.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub seed: u64,
    pub seed_source: SeedSource,
    pub threads: usize,
    pub deterministic: bool,
    pub profile: Profile,
    pub config_file: Option<PathBuf>,
    /// Arguments after config merging, program name excluded.
    pub args: Vec<String>,
    /// Set when MOHS_SEED is present but unparsable.
    pub env_seed_error: Option<String>,
}

impl RunContext {
    pub fn new(cli: &Cli, argv: &[String]) -> Self {
        let g = &cli.global;
        let env = std::env::var(SEED_ENV).ok();
        let (seed, seed_source, env_seed_error) = match (g.seed, env) {
            (Some(s), _) => (s, SeedSource::Flag, None),
            (None, Some(v)) => match v.trim().parse::<u64>() {
                Ok(s) => (s, SeedSource::Env, None),
                Err(e) => (0, SeedSource::Default, Some(format!("{SEED_ENV}=`{v}`: {e}"))),
            },
            (None, None) => (0, SeedSource::Default, None),
        };
        RunContext {
            seed,
            seed_source,
            threads: if g.deterministic { 1 } else { g.threads as usize },
            deterministic: g.deterministic,
            profile: g.profile,
            config_file: g.config.clone(),
            args: argv.iter().skip(1).cloned().collect(),
            env_seed_error,
        }
    }

    /// Records everything needed to replay the command.
    pub fn write_manifest(&self, out: &Path, command: &str, inputs: &[&Path], extra: serde_json::Value) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let h = sha256_file(p).with_context(|| format!("hashing {}", p.display()))?;
            hashes.insert(p.display().to_string(), h);
        }
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args: &self.args,
            config_file: self.config_file.as_deref().map(|p| p.display().to_string()),
            seed: self.seed,
            seed_source: self.seed_source,
            threads: self.threads,
            deterministic: self.deterministic,
            profile: self.profile,
            input_sha256: hashes,
            details: extra,
        };
        let path = out.join(format!("run-{command}.json"));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    args: &'a [String],
    config_file: Option<String>,
    seed: u64,
    seed_source: SeedSource,
    threads: usize,
    deterministic: bool,
    profile: Profile,
    input_sha256: BTreeMap<String, String>,
    details: serde_json::Value,
}
