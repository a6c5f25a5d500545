//! `key = value` config files folded into the argument list.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::CommandFactory;

use crate::Cli;

/// Parses `key = value` lines. `#` starts a comment; values may be quoted.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{raw}`", i + 1);
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push((key, value));
    }
    Ok(out)
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn given(argv: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    argv.iter().any(|a| *a == flag || a.strip_prefix(&flag).is_some_and(|rest| rest.starts_with('=')))
}

/// Inserts the config file's flags right after the subcommand name. Flags
/// also given on the command line keep their command-line value.
pub fn merge_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let entries = parse_config(&text).with_context(|| format!("in config {path}"))?;
    let cmd = Cli::command();
    let Some((pos, sub)) = argv.iter().enumerate().skip(1).find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s)))
    else {
        // No subcommand: let clap report the usage error.
        return Ok(argv);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        let arg = sub.get_arguments().chain(cmd.get_arguments()).find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            bail!("config key `{key}` is not a flag of `{}`", sub.get_name());
        };
        if given(&argv, &key) {
            continue;
        }
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                other => bail!("config key `{key}` is a switch; expected true or false, got `{other}`"),
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_underscores() {
        let c = parse_config("# comment\nbatch_size = 4\nout = \"a b\" # trailing\n\n").unwrap();
        assert_eq!(c, vec![("batch-size".into(), "4".into()), ("out".into(), "a b".into())]);
    }

    #[test]
    fn command_line_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "seed = 5\nn = 2\ndeterministic = true\n").unwrap();
        let argv: Vec<String> = ["mohs", "--config", cfg.to_str().unwrap(), "synth", "--seed=9", "--deterministic"]
            .map(String::from)
            .to_vec();
        let merged = merge_config(argv).unwrap();
        assert_eq!(&merged[3..], ["synth", "--n=2", "--seed=9", "--deterministic"]);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("epochs 4").is_err());
    }
}
