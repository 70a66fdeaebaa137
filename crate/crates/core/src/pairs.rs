//! "B better than A" preference pairs and the instruction-tuning dataset.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{brackets_balanced, scan_calls, split_args, validate_candidate};
use crate::gateway::{format_accuracy, render_finetune_output, render_prompt_lines, Bindings, Placeholder, TemplateId};
use crate::repository::{CandidateRecord, CurationMode};

/// Size written by the resize augmentation.
pub const AUGMENT_RESIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairProvenance {
    Original,
    Resize256Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPolicy {
    /// B drawn uniformly among all strictly better records.
    #[default]
    UniformBetter,
    /// B is the better record with the smallest accuracy gap.
    NearestBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub base_id: u64,
    pub addon_id: u64,
    pub base_accuracy: f64,
    pub addon_accuracy: f64,
    pub base_code: String,
    pub addon_code: String,
    pub provenance: PairProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSample {
    pub prompt: Vec<String>,
    pub output: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("no records to pair")]
    Empty,
    #[error("record {0} has no accuracy")]
    Unevaluated(u64),
    #[error("augment fraction {0} outside [0, 1]")]
    Fraction(f64),
}

/// One pair per record that has a strictly better peer. Output is ordered
/// by base id and does not depend on the order of `records`.
pub fn build_pairs(records: &[CandidateRecord], policy: PairPolicy, seed: u64) -> Result<Vec<PreferencePair>, PairError> {
    if records.is_empty() {
        return Err(PairError::Empty);
    }
    let mut ranked: Vec<(f64, &CandidateRecord)> = Vec::with_capacity(records.len());
    for r in records {
        ranked.push((r.accuracy.ok_or(PairError::Unevaluated(r.record_id))?, r));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.record_id.cmp(&b.1.record_id)));
    let mut bases: Vec<usize> = (0..ranked.len()).collect();
    bases.sort_by_key(|&i| ranked[i].1.record_id);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for i in bases {
        let (acc, base) = ranked[i];
        let first_better = ranked.partition_point(|(a, _)| *a <= acc);
        if first_better == ranked.len() {
            continue;
        }
        let pick = match policy {
            PairPolicy::UniformBetter => rng.random_range(first_better..ranked.len()),
            PairPolicy::NearestBetter => first_better,
        };
        let (addon_acc, addon) = ranked[pick];
        pairs.push(PreferencePair {
            base_id: base.record_id,
            addon_id: addon.record_id,
            base_accuracy: acc,
            addon_accuracy: addon_acc,
            base_code: base.code.clone(),
            addon_code: addon.code.clone(),
            provenance: PairProvenance::Original,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    NoResize,
    /// A Resize whose size is not a literal, so it cannot be rewritten.
    OpaqueSize,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Augmentation {
    pub pairs: Vec<PreferencePair>,
    /// Index into the input pairs plus the reason it was not augmented.
    pub skipped: Vec<(usize, SkipReason)>,
}

static INT_LITERAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b\d+\b").unwrap());

/// Byte range of the size argument of one `Resize(...)` call, if present.
fn size_arg_span(args: &str) -> Option<(usize, usize)> {
    let base = args.as_ptr() as usize;
    for (i, part) in split_args(args).into_iter().enumerate() {
        let start = part.as_ptr() as usize - base;
        if let Some(rest) = part.strip_prefix("size") {
            let rest_trim = rest.trim_start();
            if let Some(value) = rest_trim.strip_prefix('=') {
                let value = value.trim_start();
                let vstart = value.as_ptr() as usize - base;
                return Some((vstart, vstart + value.len()));
            }
        }
        if i == 0 && !part.contains('=') {
            return Some((start, start + part.len()));
        }
    }
    None
}

/// Sizes given to every `Resize` call: integer literals found in each size
/// argument. A Resize without a literal size yields an empty list.
pub fn resize_sizes(code: &str) -> Vec<Vec<u32>> {
    scan_calls(code, |n| n == "Resize")
        .iter()
        .map(|c| {
            size_arg_span(&c.args)
                .map(|(s, e)| INT_LITERAL.find_iter(&c.args[s..e]).filter_map(|m| m.as_str().parse().ok()).collect())
                .unwrap_or_default()
        })
        .collect()
}

/// Rewrites every size literal of every `Resize` call to `size`, keeping
/// the argument's shape (int, tuple, list, `size=` keyword).
pub fn rewrite_resize(code: &str, size: u32) -> Result<String, SkipReason> {
    let calls = scan_calls(code, |n| n == "Resize");
    if calls.is_empty() {
        return Err(SkipReason::NoResize);
    }
    let mut edits: Vec<(usize, usize)> = Vec::new();
    for call in &calls {
        let (s, e) = size_arg_span(&call.args).ok_or(SkipReason::OpaqueSize)?;
        let (s, e) = (call.args_span.0 + s, call.args_span.0 + e);
        if !INT_LITERAL.is_match(&code[s..e]) {
            return Err(SkipReason::OpaqueSize);
        }
        edits.push((s, e));
    }
    edits.sort();
    edits.dedup();
    let mut out = String::with_capacity(code.len());
    let mut pos = 0;
    for (s, e) in edits {
        if s < pos {
            continue;
        }
        out.push_str(&code[pos..s]);
        out.push_str(&INT_LITERAL.replace_all(&code[s..e], size.to_string()));
        pos = e;
    }
    out.push_str(&code[pos..]);
    Ok(out)
}

fn augment_one(pair: &PreferencePair) -> Result<PreferencePair, SkipReason> {
    let code = rewrite_resize(&pair.addon_code, AUGMENT_RESIZE)?;
    let report = validate_candidate(&code);
    if !report.is_valid() {
        let names: Vec<&str> = report.violations.iter().map(|v| v.as_str()).collect();
        return Err(SkipReason::Invalid(names.join(",")));
    }
    if !brackets_balanced(&code) {
        return Err(SkipReason::Invalid("unbalanced brackets".into()));
    }
    if resize_sizes(&code).iter().flatten().any(|&s| s != AUGMENT_RESIZE) {
        return Err(SkipReason::Invalid("resize rewrite incomplete".into()));
    }
    Ok(PreferencePair { addon_code: code, provenance: PairProvenance::Resize256Augmented, ..pair.clone() })
}

/// Picks `floor(fraction * n)` pairs without replacement and returns copies
/// whose add-on code resizes to 256. Inputs are not modified.
pub fn augment_resize256(pairs: &[PreferencePair], fraction: f64, seed: u64) -> Result<Augmentation, PairError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PairError::Fraction(fraction));
    }
    let k = (fraction * pairs.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut chosen = index::sample(&mut rng, pairs.len(), k).into_vec();
    chosen.sort_unstable();
    let mut out = Augmentation::default();
    for i in chosen {
        match augment_one(&pairs[i]) {
            Ok(p) => out.pairs.push(p),
            Err(reason) => {
                log::warn!("augmentation skipped pair {} -> {}: {reason:?}", pairs[i].base_id, pairs[i].addon_id);
                out.skipped.push((i, reason));
            }
        }
    }
    Ok(out)
}

/// Curated: error records dropped, one record per digest (lowest id).
/// Unfiltered: everything kept, error records scored 0.0.
/// Output is ordered by record id.
pub fn curate(records: &[CandidateRecord], mode: CurationMode) -> Vec<CandidateRecord> {
    let mut sorted: Vec<&CandidateRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.record_id);
    match mode {
        CurationMode::Curated => {
            let mut seen = HashSet::new();
            sorted.into_iter().filter(|r| !r.is_error() && seen.insert(r.digest.as_str())).cloned().collect()
        }
        CurationMode::Unfiltered => sorted
            .into_iter()
            .map(|r| {
                let mut r = r.clone();
                if r.is_error() {
                    r.accuracy = Some(0.0);
                }
                r
            })
            .collect(),
    }
}

pub fn finetune_sample(pair: &PreferencePair) -> FinetuneSample {
    let bindings = Bindings::from([
        (Placeholder::Accuracy, format_accuracy(pair.base_accuracy)),
        (Placeholder::TransformCode, pair.base_code.clone()),
    ]);
    let prompt = render_prompt_lines(TemplateId::FinetuneDirect, &bindings).expect("bindings cover the template");
    FinetuneSample { prompt, output: vec![render_finetune_output(&pair.addon_code)] }
}

/// Dataset text: one JSON object per line, each line `\n`-terminated.
pub fn render_dataset(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&finetune_sample(p)).expect("samples serialize"));
        out.push('\n');
    }
    out
}

pub fn emit_dataset(pairs: &[PreferencePair], path: impl AsRef<Path>) -> io::Result<usize> {
    fs::write(path, render_dataset(pairs))?;
    Ok(pairs.len())
}

pub fn parse_dataset(text: &str) -> Result<Vec<FinetuneSample>, serde_json::Error> {
    text.lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect()
}
