//! Evaluation jobs, results, the worker wire schema, and the deterministic
//! surrogate evaluator used for desk-scale runs.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, canonicalize, scan_calls, split_args, validate_candidate};
use crate::transform_space::{default_catalog, Catalog, RenderStyle};

/// Fixed training configuration every candidate is evaluated under. Field
/// names match the worker wire schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    pub task: String,
    #[serde(rename = "epochs")]
    pub train_epochs: u32,
    #[serde(rename = "batch")]
    pub batch_size: u32,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset_name: "cifar-10".into(),
            task: "img-classification".into(),
            train_epochs: 1,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub job_id: String,
    pub code: String,
    pub config: EvalConfig,
    /// Unix milliseconds.
    pub submitted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    SyntaxError,
    RuntimeError,
    Timeout,
    WorkerUnreachable,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::SyntaxError => "syntax_error",
            ErrorClass::RuntimeError => "runtime_error",
            ErrorClass::Timeout => "timeout",
            ErrorClass::WorkerUnreachable => "worker_unreachable",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutcome {
    Accuracy(f64),
    Error { class: ErrorClass, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub job_id: String,
    pub outcome: EvalOutcome,
}

impl EvalResult {
    pub fn accuracy(job_id: impl Into<String>, accuracy: f64) -> Self {
        EvalResult { job_id: job_id.into(), outcome: EvalOutcome::Accuracy(accuracy) }
    }

    pub fn error(job_id: impl Into<String>, class: ErrorClass, detail: impl Into<String>) -> Self {
        EvalResult { job_id: job_id.into(), outcome: EvalOutcome::Error { class, detail: detail.into() } }
    }

    pub fn accuracy_value(&self) -> Option<f64> {
        match self.outcome {
            EvalOutcome::Accuracy(a) => Some(a),
            EvalOutcome::Error { .. } => None,
        }
    }

    pub fn error_class(&self) -> Option<ErrorClass> {
        match &self.outcome {
            EvalOutcome::Accuracy(_) => None,
            EvalOutcome::Error { class, .. } => Some(*class),
        }
    }
}

/// `POST /evaluate` request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub job_id: String,
    pub code: String,
    pub config: EvalConfig,
}

impl From<&EvalJob> for EvaluateRequest {
    fn from(job: &EvalJob) -> Self {
        EvaluateRequest { job_id: job.job_id.clone(), code: job.code.clone(), config: job.config.clone() }
    }
}

/// `POST /evaluate` 200 response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvaluateResponse {
    Accuracy { job_id: String, accuracy: f64 },
    Error { job_id: String, error_class: ErrorClass, detail: String },
}

impl From<EvalResult> for EvaluateResponse {
    fn from(r: EvalResult) -> Self {
        match r.outcome {
            EvalOutcome::Accuracy(accuracy) => EvaluateResponse::Accuracy { job_id: r.job_id, accuracy },
            EvalOutcome::Error { class, detail } => {
                EvaluateResponse::Error { job_id: r.job_id, error_class: class, detail }
            }
        }
    }
}

impl EvaluateResponse {
    pub fn job_id(&self) -> &str {
        match self {
            EvaluateResponse::Accuracy { job_id, .. } | EvaluateResponse::Error { job_id, .. } => job_id,
        }
    }

    /// Converts to a result, rejecting accuracies outside `[0, 1]`.
    pub fn into_result(self) -> Result<EvalResult, String> {
        match self {
            EvaluateResponse::Accuracy { job_id, accuracy } => {
                if (0.0..=1.0).contains(&accuracy) {
                    Ok(EvalResult::accuracy(job_id, accuracy))
                } else {
                    Err(format!("accuracy {accuracy} outside [0, 1]"))
                }
            }
            EvaluateResponse::Error { job_id, error_class, detail } => {
                Ok(EvalResult::error(job_id, error_class, detail))
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("job batch is empty")]
    EmptyBatch,
    #[error("job `{0}` has empty code")]
    EmptyCode(String),
    #[error("job id `{0}` appears more than once")]
    DuplicateJobId(String),
}

/// Batch preconditions shared by every evaluator.
pub fn check_jobs(jobs: &[EvalJob]) -> Result<(), EvalError> {
    if jobs.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let mut ids = HashSet::new();
    for job in jobs {
        if job.code.trim().is_empty() {
            return Err(EvalError::EmptyCode(job.job_id.clone()));
        }
        if !ids.insert(job.job_id.as_str()) {
            return Err(EvalError::DuplicateJobId(job.job_id.clone()));
        }
    }
    Ok(())
}

/// Anything that turns candidate code into accuracies. Batch-level errors
/// are reserved for precondition violations; everything else is reported
/// per job, one result per job, in job order.
pub trait Evaluator {
    fn evaluate(&self, jobs: &[EvalJob]) -> Result<Vec<EvalResult>, EvalError>;
}

/// Per-op contribution in the surrogate: `effect + slope * intensity`, where
/// intensity is the mean position of the op's numeric arguments within its
/// catalog domain (0 = low end, 1 = high end).
#[derive(Debug, Clone, Copy)]
pub struct OpEffect {
    pub op: &'static str,
    pub effect: f64,
    pub slope: f64,
}

/// Synthetic feature table. These numbers are made up to give the loop a
/// plausible landscape; they are not measurements.
pub const SURROGATE_OP_EFFECTS: &[OpEffect] = &[
    OpEffect { op: "RandomHorizontalFlip", effect: 0.012, slope: 0.008 },
    OpEffect { op: "RandomVerticalFlip", effect: -0.005, slope: -0.030 },
    OpEffect { op: "RandomRotation", effect: 0.000, slope: -0.050 },
    OpEffect { op: "RandomResizedCrop", effect: -0.010, slope: 0.040 },
    OpEffect { op: "RandomCrop", effect: 0.004, slope: 0.000 },
    OpEffect { op: "CenterCrop", effect: -0.020, slope: 0.030 },
    OpEffect { op: "ColorJitter", effect: 0.006, slope: -0.040 },
    OpEffect { op: "GaussianBlur", effect: -0.004, slope: -0.030 },
    OpEffect { op: "RandomPosterize", effect: 0.016, slope: 0.010 },
    OpEffect { op: "RandomSolarize", effect: -0.010, slope: 0.010 },
    OpEffect { op: "RandomAffine", effect: -0.004, slope: -0.040 },
    OpEffect { op: "RandomGrayscale", effect: -0.006, slope: -0.030 },
    OpEffect { op: "RandomPerspective", effect: -0.006, slope: -0.040 },
    OpEffect { op: "RandomAdjustSharpness", effect: 0.008, slope: -0.010 },
    OpEffect { op: "RandomAutocontrast", effect: 0.010, slope: 0.000 },
    OpEffect { op: "RandomInvert", effect: -0.015, slope: -0.060 },
    OpEffect { op: "RandomEqualize", effect: 0.006, slope: -0.006 },
];

/// Score of a tail-only pipeline at 64 px, before op effects.
pub const SURROGATE_BASE: f64 = 0.530;
/// Subtracted per variable op beyond the first.
pub const SURROGATE_STACK_PENALTY: f64 = 0.020;
/// Contribution of an op the table does not know.
pub const SURROGATE_UNKNOWN_OP: f64 = -0.010;
/// Subtracted when no `Normalize` stage is present.
pub const SURROGATE_NO_NORMALIZE: f64 = 0.030;
/// Resolution term: `RESOLUTION_GAIN * log2(size / 64)`, clamped to
/// `±RESOLUTION_CAP`. Size is the first argument of the last `Resize`, or
/// 32 (native CIFAR-10) when there is none.
pub const SURROGATE_RESOLUTION_GAIN: f64 = 0.030;
pub const SURROGATE_RESOLUTION_CAP: f64 = 0.060;
/// Half-width of the digest-derived jitter added to every score.
pub const SURROGATE_JITTER: f64 = 0.015;

const TAIL_OPS: &[&str] = &["Resize", "ToTensor", "Normalize", "Compose"];

fn parse_numbers(text: &str) -> Vec<f64> {
    text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == 'e' || c == 'E' || c == '+'))
        .filter_map(|t| t.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .collect()
}

fn jitter(digest: &str) -> f64 {
    let bits = u64::from_str_radix(&digest[..16], 16).unwrap_or(0);
    let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
    (unit * 2.0 - 1.0) * SURROGATE_JITTER
}

fn resolution_bonus(size: f64) -> f64 {
    (SURROGATE_RESOLUTION_GAIN * (size / 64.0).log2()).clamp(-SURROGATE_RESOLUTION_CAP, SURROGATE_RESOLUTION_CAP)
}

/// Deterministic stand-in for "train one epoch and report test accuracy".
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    catalog: Catalog,
}

impl Default for SurrogateEvaluator {
    fn default() -> Self {
        SurrogateEvaluator { catalog: default_catalog() }
    }
}

impl SurrogateEvaluator {
    pub fn new(catalog: Catalog) -> Self {
        SurrogateEvaluator { catalog }
    }

    /// Scores one candidate. Structurally invalid or unbalanced code is a
    /// syntax error; a missing `ToTensor`, a probability outside `[0, 1]` or
    /// an even blur kernel is a runtime error.
    pub fn score(&self, code: &str) -> Result<f64, (ErrorClass, String)> {
        let report = validate_candidate(code);
        if !report.is_valid() {
            let names: Vec<&str> = report.violations.iter().map(|v| v.as_str()).collect();
            return Err((ErrorClass::SyntaxError, names.join(",")));
        }
        if !codec::brackets_balanced(code) {
            return Err((ErrorClass::SyntaxError, "unbalanced brackets".into()));
        }
        let canonical = canonicalize(code).map_err(|e| (ErrorClass::SyntaxError, e.to_string()))?;

        let is_known = |n: &str| TAIL_OPS.contains(&n) || self.catalog.op(n).is_some();
        let calls = scan_calls(code, |n| n.chars().next().is_some_and(|c| c.is_ascii_uppercase()));
        if !calls.iter().any(|c| c.name == "ToTensor") {
            return Err((ErrorClass::RuntimeError, "pipeline never converts to a tensor".into()));
        }

        let mut score = SURROGATE_BASE;
        let mut variable_ops = 0usize;
        let mut last_resize: Option<f64> = None;
        for call in &calls {
            let args = split_args(&call.args);
            for arg in &args {
                if let Some(v) = arg.strip_prefix("p=").and_then(|v| v.trim().parse::<f64>().ok()) {
                    if !(0.0..=1.0).contains(&v) {
                        return Err((ErrorClass::RuntimeError, format!("{}: probability {v} outside [0, 1]", call.name)));
                    }
                }
            }
            match call.name.as_str() {
                "Resize" => {
                    last_resize = parse_numbers(args.first().copied().unwrap_or("")).first().copied();
                    continue;
                }
                "ToTensor" | "Normalize" | "Compose" => continue,
                "GaussianBlur" => {
                    let ks = args
                        .iter()
                        .find_map(|a| a.strip_prefix("kernel_size="))
                        .or_else(|| args.first().copied().filter(|a| !a.contains('=')));
                    if let Some(k) = ks.and_then(|k| parse_numbers(k).first().copied()) {
                        if k <= 0.0 || (k as i64) % 2 == 0 {
                            return Err((ErrorClass::RuntimeError, format!("GaussianBlur: kernel size {k} must be odd and positive")));
                        }
                    }
                }
                _ => {}
            }
            if !is_known(&call.name) && !call.name.starts_with("Random") && !call.name.ends_with("Jitter") {
                // Not a transform (e.g. a helper class); ignore.
                continue;
            }
            variable_ops += 1;
            score += match (
                SURROGATE_OP_EFFECTS.iter().find(|e| e.op == call.name),
                self.catalog.op(&call.name),
            ) {
                (Some(effect), Some(spec)) => effect.effect + effect.slope * self.intensity(spec, &args),
                (Some(effect), None) => effect.effect + effect.slope * 0.5,
                _ => SURROGATE_UNKNOWN_OP,
            };
        }
        score -= SURROGATE_STACK_PENALTY * variable_ops.saturating_sub(1) as f64;
        score += resolution_bonus(last_resize.filter(|s| *s > 0.0).unwrap_or(32.0));
        if !calls.iter().any(|c| c.name == "Normalize") {
            score -= SURROGATE_NO_NORMALIZE;
        }
        score += jitter(&canonical.digest);
        Ok(score.clamp(0.0, 1.0))
    }

    fn intensity(&self, spec: &crate::transform_space::TransformOpSpec, args: &[&str]) -> f64 {
        let mut positions = Vec::new();
        let mut positional = spec.params.iter().filter(|p| p.style == RenderStyle::Positional);
        for arg in args {
            let (param, value) = match arg.split_once('=') {
                Some((name, value)) if !name.contains('(') => (spec.params.iter().find(|p| p.name == name.trim()), value),
                _ => (positional.next(), *arg),
            };
            let Some(param) = param else { continue };
            let bounds = param.domain.numeric_bounds();
            for (v, b) in parse_numbers(value).into_iter().zip(bounds) {
                if let Some((lo, hi)) = b {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    positions.push(t.clamp(0.0, 1.0));
                }
            }
        }
        if positions.is_empty() {
            0.5
        } else {
            positions.iter().sum::<f64>() / positions.len() as f64
        }
    }

    pub fn evaluate_one(&self, job_id: &str, code: &str) -> EvalResult {
        match self.score(code) {
            Ok(acc) => EvalResult::accuracy(job_id, acc),
            Err((class, detail)) => EvalResult::error(job_id, class, detail),
        }
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, jobs: &[EvalJob]) -> Result<Vec<EvalResult>, EvalError> {
        check_jobs(jobs)?;
        Ok(jobs.iter().map(|j| self.evaluate_one(&j.job_id, &j.code)).collect())
    }
}

/// Surrogate evaluation with the default catalog. `config` does not change
/// the score; the surrogate models the canonical configuration only.
pub fn surrogate_evaluate(code: &str, _config: &EvalConfig) -> EvalResult {
    SurrogateEvaluator::default().evaluate_one("surrogate", code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform_space::{enumerate_pipelines, render_compose, render_pipeline, FixedTail};

    fn tail_only(resize: u32) -> String {
        render_compose(&[], &FixedTail::default(), (resize, resize))
    }

    #[test]
    fn canonical_config() {
        let c = EvalConfig::default();
        assert_eq!(c.dataset_name, "cifar-10");
        assert_eq!(c.task, "img-classification");
        assert_eq!((c.train_epochs, c.batch_size), (1, 64));
        assert_eq!((c.learning_rate, c.momentum, c.dropout), (0.01, 0.9, 0.2));
    }

    #[test]
    fn invalid_code_is_syntax_error() {
        let r = surrogate_evaluate("def broken(", &EvalConfig::default());
        assert_eq!(r.error_class(), Some(ErrorClass::SyntaxError));
        let r = surrogate_evaluate("def augment():\n    pass\n", &EvalConfig::default());
        assert_eq!(r.error_class(), Some(ErrorClass::SyntaxError));
    }

    #[test]
    fn deterministic() {
        let code = tail_only(64);
        let a = surrogate_evaluate(&code, &EvalConfig::default());
        let b = surrogate_evaluate(&code, &EvalConfig::default());
        assert_eq!(a, b);
        assert!(a.accuracy_value().is_some());
    }

    #[test]
    fn resize_256_beats_resize_64() {
        let cat = default_catalog();
        let eval = SurrogateEvaluator::default();
        for p in enumerate_pipelines(&cat, 2, 300, 17).unwrap() {
            let code = render_pipeline(&cat, &p).unwrap();
            let big = code.replace("Resize((64, 64))", "Resize((256, 256))");
            assert_ne!(code, big);
            let small = eval.score(&code).unwrap();
            let large = eval.score(&big).unwrap();
            assert!(large > small, "{large} <= {small} for\n{code}");
        }
    }

    #[test]
    fn runtime_errors() {
        let eval = SurrogateEvaluator::default();
        let no_tensor = tail_only(64).replace("        transforms.ToTensor(),\n", "");
        assert_eq!(eval.score(&no_tensor).unwrap_err().0, ErrorClass::RuntimeError);
        let bad_p = render_compose(&["RandomInvert(p=1.5)".into()], &FixedTail::default(), (64, 64));
        assert_eq!(eval.score(&bad_p).unwrap_err().0, ErrorClass::RuntimeError);
        let even = render_compose(&["GaussianBlur(kernel_size=4, sigma=1.0)".into()], &FixedTail::default(), (64, 64));
        assert_eq!(eval.score(&even).unwrap_err().0, ErrorClass::RuntimeError);
    }

    #[test]
    fn brute_scores_in_range_and_single_ops_win_on_average() {
        let cat = default_catalog();
        let eval = SurrogateEvaluator::default();
        let mut means = Vec::new();
        for arity in 1..=3 {
            let scores: Vec<f64> = enumerate_pipelines(&cat, arity, 500, 3)
                .unwrap()
                .iter()
                .map(|p| eval.score(&render_pipeline(&cat, p).unwrap()).unwrap())
                .collect();
            assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
            means.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn batch_preconditions() {
        let eval = SurrogateEvaluator::default();
        assert_eq!(eval.evaluate(&[]), Err(EvalError::EmptyBatch));
        let job = EvalJob { job_id: "a".into(), code: "".into(), config: EvalConfig::default(), submitted_at: 0 };
        assert_eq!(eval.evaluate(std::slice::from_ref(&job)), Err(EvalError::EmptyCode("a".into())));
        let ok = EvalJob { code: tail_only(64), ..job };
        assert_eq!(eval.evaluate(&[ok.clone(), ok.clone()]), Err(EvalError::DuplicateJobId("a".into())));
        assert_eq!(eval.evaluate(&[ok]).unwrap().len(), 1);
    }

    #[test]
    fn wire_shapes() {
        let req = EvaluateRequest { job_id: "j1".into(), code: "x".into(), config: EvalConfig::default() };
        let json = serde_json::to_value(&req).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "job_id": "j1", "code": "x",
                "config": {"dataset": "cifar-10", "task": "img-classification", "epochs": 1,
                           "batch": 64, "lr": 0.01, "momentum": 0.9, "dropout": 0.2}
            })
        );
        let ok: EvaluateResponse = serde_json::from_str(r#"{"job_id":"j1","accuracy":0.52}"#).unwrap();
        assert_eq!(ok.into_result().unwrap(), EvalResult::accuracy("j1", 0.52));
        let err: EvaluateResponse =
            serde_json::from_str(r#"{"job_id":"j2","error_class":"syntax_error","detail":"line 1"}"#).unwrap();
        assert_eq!(err.into_result().unwrap().error_class(), Some(ErrorClass::SyntaxError));
        let out_of_range: EvaluateResponse = serde_json::from_str(r#"{"job_id":"j3","accuracy":1.5}"#).unwrap();
        assert!(out_of_range.into_result().is_err());
    }
}
