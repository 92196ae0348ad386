//! `--config FILE` support.
//!
//! The file is TOML. Top-level keys set global flags or any flag of that
//! name on the chosen subcommand; keys inside a `[subcommand]` table apply
//! to that subcommand only and must name one of its flags. Values are
//! spliced into the argument list ahead of the user's own flags, which
//! therefore take precedence.

use std::ffi::OsString;

use anyhow::{anyhow, bail, Context, Result};
use clap::CommandFactory;
use toml::Value;

use crate::Cli;

/// Global flags that take a value, so their values are not mistaken for the
/// subcommand name.
const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--format", "--threads", "--config"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn subcommand_position(args: &[OsString], names: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if names.iter().any(|n| *n == s) {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn render(value: &Value) -> Result<Option<String>> {
    Ok(Some(match value {
        Value::Boolean(false) => return Ok(None),
        Value::Boolean(true) => String::new(),
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|v| render(v).map(Option::unwrap_or_default))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        other => bail!("unsupported config value {other}"),
    }))
}

/// Returns `args` with the config file's settings inserted after the
/// subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.to_string_lossy()))?;

    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_owned()).collect();
    let Some(pos) = subcommand_position(&args, &names) else {
        return Ok(args);
    };
    let sub_name = args[pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&sub_name).expect("known subcommand");
    let global = |key: &str| key != "config" && cmd.get_arguments().any(|a| a.is_global_set() && a.get_long() == Some(key));
    let accepts = |key: &str| global(key) || sub.get_arguments().any(|a| a.get_long() == Some(key));

    let mut injected: Vec<OsString> = Vec::new();
    let mut push = |key: &str, value: &Value| -> Result<()> {
        if let Some(v) = render(value)? {
            injected.push(format!("--{key}").into());
            if !matches!(value, Value::Boolean(true)) {
                injected.push(v.into());
            }
        }
        Ok(())
    };
    for (key, value) in &table {
        if value.is_table() || !accepts(key) {
            continue;
        }
        push(key, value)?;
    }
    if let Some(section) = table.get(&sub_name) {
        let section = section
            .as_table()
            .ok_or_else(|| anyhow!("config key '{sub_name}' must be a table"))?;
        for (key, value) in section {
            if !accepts(key) {
                bail!("config section [{sub_name}] sets unknown flag '{key}'");
            }
            push(key, value)?;
        }
    }

    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
