//! Prompt templates, sampling parameters, reference selection, and the
//! generator abstraction the loop talks to.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repository::CandidateRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    /// Instruction-tuning sample: one baseline in, improved transform out.
    FinetuneDirect,
    /// Generation from two references, plain instructions.
    GenerateDirect,
    /// Generation from two references with analysis step and negative constraints.
    GenerateCot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [TemplateId::FinetuneDirect, TemplateId::GenerateDirect, TemplateId::GenerateCot];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::FinetuneDirect => "finetune_direct",
            TemplateId::GenerateDirect => "generate_direct",
            TemplateId::GenerateCot => "generate_cot",
        }
    }

    pub fn lines(self) -> &'static [&'static str] {
        match self {
            TemplateId::FinetuneDirect => FINETUNE_DIRECT,
            TemplateId::GenerateDirect => GENERATE_DIRECT,
            TemplateId::GenerateCot => GENERATE_COT,
        }
    }

    pub fn placeholders(self) -> &'static [Placeholder] {
        match self {
            TemplateId::FinetuneDirect => &[Placeholder::Accuracy, Placeholder::TransformCode],
            TemplateId::GenerateDirect | TemplateId::GenerateCot => &[
                Placeholder::Accuracy,
                Placeholder::TransformCode,
                Placeholder::AddonAccuracy,
                Placeholder::AddonTransformCode,
            ],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    Accuracy,
    TransformCode,
    AddonAccuracy,
    AddonTransformCode,
}

impl Placeholder {
    pub const ALL: [Placeholder; 4] = [
        Placeholder::Accuracy,
        Placeholder::TransformCode,
        Placeholder::AddonAccuracy,
        Placeholder::AddonTransformCode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Placeholder::Accuracy => "accuracy",
            Placeholder::TransformCode => "transform_code",
            Placeholder::AddonAccuracy => "addon_accuracy",
            Placeholder::AddonTransformCode => "addon_transform_code",
        }
    }
}

const FINETUNE_DIRECT: &[&str] = &[
    "You are an expert image transformation optimizer.",
    "Baseline transform code (Accuracy: {accuracy}):",
    "<tr>{transform_code}</tr>",
    "Generate an improved Python transform function ('transform') that achieves a higher accuracy with 1 epoch, batch 64, lr 0.01, and momentum 0.9 for 'cifar-10' dataset and task: 'img-classification' ",
    "Your response MUST contain exactly one set of the XML tags <tr>...</tr>. DO NOT include any leading or trailing text, markdown fences (```), comments, or any other XML tags like <path> or <text>.",
];

/// Target line of a fine-tuning sample.
pub const FINETUNE_OUTPUT: &str = "<tr>{addon_transform_code}</tr>";

const GENERATE_DIRECT: &[&str] = &[
    "You are an expert image transformation generator.",
    "Your task is to generate new image transformation code.",
    "Use common patterns and ideas from the following two reference transforms:",
    "Reference 1 (Accuracy: {accuracy}):",
    "<tr>{transform_code}</tr>",
    "Reference 2 (Accuracy: {addon_accuracy}):",
    "<tr>{addon_transform_code}</tr>",
    "Provide a new, high-performance transform for 'cifar-10' (task: 'img-classification') for training with 1 epoch, batch 64, lr 0.01, and momentum 0.9",
    "Respond with:",
    "1. A <tr> XML tag containing the complete Python transform code (function name 'transform').",
    "The code must be wrapped strictly in <tr> and </tr> tags.",
];

const GENERATE_COT: &[&str] = &[
    "You are an expert image transformation generator.",
    "Your task is to synthesize a high-performance augmentation strategy with common patterns and ideas of two reference transforms.",
    "### Reference 1 (Acc: {accuracy})",
    "<tr>{transform_code}</tr>",
    "### Reference 2 (Acc: {addon_accuracy})",
    "<tr>{addon_transform_code}</tr>",
    "### Task",
    "Create a new 'transform' function for CIFAR-10 that combines the effective parts of both references.",
    "Target Settings: 1 epoch, batch 64, lr 0.01.",
    "### Instructions",
    "1. Briefly analyze why Ref 1 and 2 worked, and propose a strategy.",
    "2. <tr>: Write the executable Python code.",
    "### Negative Constraints",
    "- DO NOT output SVG, <path>, <g>, or HTML tags.",
    "- DO NOT output markdown fences (```).",
    "Respond strictly in this format:",
    "<tr>... code ...</tr>",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` needs a binding for `{placeholder}`")]
    MissingBinding { template: TemplateId, placeholder: &'static str },
}

pub type Bindings = BTreeMap<Placeholder, String>;

/// Bindings for a generation prompt from two references.
pub fn reference_bindings(a: &CandidateRecord, b: &CandidateRecord) -> Bindings {
    Bindings::from([
        (Placeholder::Accuracy, format_accuracy(a.accuracy.unwrap_or(0.0))),
        (Placeholder::TransformCode, a.code.clone()),
        (Placeholder::AddonAccuracy, format_accuracy(b.accuracy.unwrap_or(0.0))),
        (Placeholder::AddonTransformCode, b.code.clone()),
    ])
}

/// Accuracies are shown to the model with four decimals.
pub fn format_accuracy(acc: f64) -> String {
    format!("{acc:.4}")
}

/// Single-pass substitution: text inserted for one placeholder is never
/// scanned again, so code containing `{accuracy}` is copied verbatim.
fn substitute(line: &str, bindings: &Bindings) -> String {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for ph in Placeholder::ALL {
            let slot = format!("{{{}}}", ph.as_str());
            if tail.starts_with(&slot) {
                if let Some(value) = bindings.get(&ph) {
                    out.push_str(value);
                    rest = &tail[slot.len()..];
                    continue 'scan;
                }
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn check_bindings(template: TemplateId, bindings: &Bindings) -> Result<(), PromptError> {
    for ph in template.placeholders() {
        if !bindings.contains_key(ph) {
            return Err(PromptError::MissingBinding { template, placeholder: ph.as_str() });
        }
    }
    Ok(())
}

/// Template lines with placeholders substituted.
pub fn render_prompt_lines(template: TemplateId, bindings: &Bindings) -> Result<Vec<String>, PromptError> {
    check_bindings(template, bindings)?;
    Ok(template.lines().iter().map(|l| substitute(l, bindings)).collect())
}

/// Template lines joined with `\n`, placeholders substituted.
pub fn render_prompt(template: TemplateId, bindings: &Bindings) -> Result<String, PromptError> {
    Ok(render_prompt_lines(template, bindings)?.join("\n"))
}

/// Renders the output line of a fine-tuning sample.
pub fn render_finetune_output(addon_code: &str) -> String {
    let bindings = Bindings::from([(Placeholder::AddonTransformCode, addon_code.to_string())]);
    substitute(FINETUNE_OUTPUT, &bindings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_new_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { temperature: 0.8, top_p: 0.9, top_k: 70, max_new_tokens: 16 * 1024 }
    }
}

impl SamplingParams {
    pub fn check(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature {} must be a non-negative number", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must lie in (0, 1]", self.top_p));
        }
        if self.top_k == 0 {
            return Err("top_k must be positive".into());
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSelection {
    pub ref_a: u64,
    pub ref_b: u64,
    pub rng_seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectionError {
    #[error("need at least 2 valid evaluated records to pick references, found {0}")]
    TooFewRecords(usize),
}

/// Whether a record can serve as a few-shot reference.
pub fn is_reference_eligible(r: &CandidateRecord) -> bool {
    r.is_valid() && r.eval_error.is_none() && r.accuracy.is_some()
}

/// Draws two distinct eligible records uniformly without replacement.
/// Eligible records are ordered by id first, so the draw depends only on the
/// pool's contents and the seed.
pub fn select_references<'a, I>(pool: I, seed: u64) -> Result<ReferenceSelection, SelectionError>
where
    I: IntoIterator<Item = &'a CandidateRecord>,
{
    let mut ids: Vec<u64> = pool.into_iter().filter(|r| is_reference_eligible(r)).map(|r| r.record_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(SelectionError::TooFewRecords(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, ids.len(), 2);
    Ok(ReferenceSelection { ref_a: ids[picked.index(0)], ref_b: ids[picked.index(1)], rng_seed: seed })
}

/// One completion request: a fully rendered prompt plus a per-request seed
/// forwarded to the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
}

/// Per-slot failure marker. A failed slot never affects its neighbours.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum SlotError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {0}")]
    Http(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl SlotError {
    /// Failures that mean the backend itself is down rather than one
    /// response being bad.
    pub fn is_connectivity(&self) -> bool {
        matches!(self, SlotError::Unreachable(_) | SlotError::Timeout)
    }
}

/// A completion backend. Results come back in request order.
pub trait CandidateGenerator {
    fn generate(&self, requests: &[GenerationRequest], params: &SamplingParams) -> Vec<Result<String, SlotError>>;
}
