//! Config files are TOML with one table per command, keys named like the
//! long flags (`per_epoch = 10` or `per-epoch = 10`). Their entries are
//! turned into flags placed before the user's own, and since every flag may
//! be repeated with the last one winning, the command line takes precedence.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

const GLOBALS_WITH_VALUE: &[&str] = &["--workdir", "--config"];

fn find_config(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
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

/// Index of the subcommand token, skipping global flags and their values.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if GLOBALS_WITH_VALUE.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn value_to_flags(key: &str, value: &toml::Value) -> Result<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match value {
        toml::Value::Boolean(true) => vec![flag.into()],
        toml::Value::Boolean(false) => vec![],
        toml::Value::String(s) => vec![flag.into(), s.into()],
        toml::Value::Integer(n) => vec![flag.into(), n.to_string().into()],
        toml::Value::Float(x) => vec![flag.into(), x.to_string().into()],
        other => bail!("config key `{key}`: unsupported value {other}"),
    })
}

/// Returns `argv` with the config file's entries for the chosen command
/// inserted right after the command name.
pub fn expand(argv: Vec<OsString>, workdir_hint: Option<&Path>) -> Result<Vec<OsString>> {
    let Some(path) = find_config(&argv) else { return Ok(argv) };
    let mut path = std::path::PathBuf::from(path);
    if path.is_relative() && !path.exists() {
        if let Some(dir) = workdir_hint {
            path = dir.join(path);
        }
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let Some(idx) = subcommand_index(&argv) else { return Ok(argv) };
    let command = argv[idx].to_string_lossy().into_owned();
    for (k, v) in &table {
        if !v.is_table() {
            bail!("config {}: top-level key `{k}` must be a table named after a command", path.display());
        }
    }
    let section = table.get(&command).or_else(|| table.get(&command.replace('-', "_")));
    let Some(section) = section.and_then(|s| s.as_table()) else { return Ok(argv) };
    let mut injected = Vec::new();
    for (k, v) in section {
        injected.extend(value_to_flags(k, v)?);
    }
    let mut out = argv[..=idx].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[idx + 1..]);
    Ok(out)
}

/// The `--workdir` value as given, before full parsing.
pub fn workdir_hint(argv: &[OsString]) -> Option<std::path::PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--workdir" {
            return it.next().map(Into::into);
        }
        if let Some(v) = s.strip_prefix("--workdir=") {
            return Some(v.into());
        }
    }
    None
}
