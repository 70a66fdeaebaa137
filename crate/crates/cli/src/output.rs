//! Files every command leaves behind: JSON manifests and small text tables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Resolves `path` against the working directory unless it is absolute.
pub fn resolve(workdir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// What ran, with which settings, and what it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest<S> {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective argument list, config-file entries included, secrets redacted.
    pub argv: Vec<String>,
    pub started_at: u64,
    #[serde(default)]
    pub finished_at: Option<u64>,
    pub status: String,
    pub settings: S,
    #[serde(default)]
    pub outputs: serde_json::Value,
}

impl<S> Manifest<S> {
    pub fn new(command: &str, argv: &[String], settings: S) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            started_at: augloop_core::repository::now_millis(),
            finished_at: None,
            status: "running".into(),
            settings,
            outputs: serde_json::Value::Null,
        }
    }

    pub fn finish(&mut self, status: &str, outputs: serde_json::Value) {
        self.status = status.into();
        self.finished_at = Some(augloop_core::repository::now_millis());
        self.outputs = outputs;
    }
}

const SECRET_FLAGS: &[&str] = &["--llm-api-key"];

pub fn redact_argv(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut hide_next = false;
    for a in argv {
        if hide_next {
            out.push("<redacted>".into());
            hide_next = false;
        } else if let Some(flag) = SECRET_FLAGS.iter().find(|f| a.starts_with(&format!("{f}="))) {
            out.push(format!("{flag}=<redacted>"));
        } else {
            hide_next = SECRET_FLAGS.contains(&a.as_str());
            out.push(a.clone());
        }
    }
    out
}

/// Mean, maximum and a normal-approximation 95% interval of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub max: f64,
    pub ci95: (f64, f64),
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let half = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { n, mean, max, ci95: (mean - half, mean + half) })
}
