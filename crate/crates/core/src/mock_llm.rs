//! Deterministic stand-ins for a completion backend.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::codec::{digest_of, scan_calls, split_args};
use crate::gateway::{CandidateGenerator, GenerationRequest, SamplingParams, SlotError};
use crate::transform_space::{default_catalog, render_compose, Catalog, MAX_ARITY};

static TR_BLOCK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<tr>(.*?)</tr>").unwrap());

/// Resize sizes the mock may move a pipeline to.
const RESIZE_CHOICES: &[u32] = &[32, 64, 128, 224, 256];

/// What a reference contributes: its variable calls (without module
/// prefix) and its output size.
#[derive(Debug, Clone, PartialEq)]
struct Reference {
    calls: Vec<(String, String)>,
    resize: Option<u32>,
}

fn parse_reference(code: &str, catalog: &Catalog) -> Reference {
    let mut calls = Vec::new();
    let mut resize = None;
    for call in scan_calls(code, |n| n == "Resize" || catalog.op(n).is_some()) {
        if call.name == "Resize" {
            resize = split_args(&call.args).first().and_then(|a| {
                a.trim_matches(|c| c == '(' || c == ')' || c == '[' || c == ']').split(',').next()?.trim().parse().ok()
            });
        } else {
            calls.push((call.name.clone(), format!("{}({})", call.name, call.args)));
        }
    }
    Reference { calls, resize }
}

/// Recombines the reference transforms found in the prompt: keeps a random
/// subset of their ops, sometimes swaps in a fresh catalog op, sometimes
/// changes the output size, and now and then answers in a broken format.
/// Output depends only on (prompt, seed).
#[derive(Debug, Clone)]
pub struct RecombiningMock {
    pub catalog: Catalog,
    pub invalid_rate: f64,
    pub mutation_rate: f64,
    pub resize_rate: f64,
}

impl Default for RecombiningMock {
    fn default() -> Self {
        RecombiningMock { catalog: default_catalog(), invalid_rate: 0.1, mutation_rate: 0.3, resize_rate: 0.35 }
    }
}

impl RecombiningMock {
    pub fn respond(&self, prompt: &str, seed: u64) -> String {
        let prompt_hash = u64::from_str_radix(&digest_of(prompt)[..16], 16).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_hash ^ seed.rotate_left(17));

        let refs: Vec<Reference> = TR_BLOCK
            .captures_iter(prompt)
            .map(|c| c.get(1).unwrap().as_str())
            .filter(|code| code.contains("def transform"))
            .map(|code| parse_reference(code, &self.catalog))
            .collect();

        let mut pool: Vec<(String, String)> = Vec::new();
        for r in &refs {
            for call in &r.calls {
                if !pool.iter().any(|(name, _)| name == &call.0) {
                    pool.push(call.clone());
                }
            }
        }
        pool.shuffle(&mut rng);
        let keep = if pool.is_empty() { 0 } else { rng.random_range(1..=pool.len().min(MAX_ARITY)) };
        pool.truncate(keep);

        if pool.is_empty() || rng.random_bool(self.mutation_rate) {
            let spec = &self.catalog.ops[rng.random_range(0..self.catalog.ops.len())];
            if spec.name != "Resize" && !pool.iter().any(|(n, _)| n == &spec.name) {
                let call = spec.render(&spec.sample_values(&mut rng)).expect("sampled values lie in domain");
                if pool.len() >= MAX_ARITY {
                    let i = rng.random_range(0..pool.len());
                    pool[i] = (spec.name.clone(), call);
                } else {
                    pool.push((spec.name.clone(), call));
                }
            }
        }
        if pool.is_empty() {
            pool.push(("RandomHorizontalFlip".into(), "RandomHorizontalFlip()".into()));
        }

        let inherited: Vec<u32> = refs.iter().filter_map(|r| r.resize).collect();
        let size = if rng.random_bool(self.resize_rate) || inherited.is_empty() {
            RESIZE_CHOICES[rng.random_range(0..RESIZE_CHOICES.len())]
        } else {
            inherited[rng.random_range(0..inherited.len())]
        };

        let calls: Vec<String> = pool.into_iter().map(|(_, c)| c).collect();
        let code = render_compose(&calls, &self.catalog.tail, (size, size));

        if rng.random_bool(self.invalid_rate) {
            return match rng.random_range(0..4) {
                0 => format!("```python\n{code}```"),
                1 => code,
                2 => format!("<tr>{}</tr>", code.replace("def transform(", "def augment(")),
                _ => format!("<tr>{code}</tr>\n<path d=\"M0 0\"/>"),
            };
        }
        if prompt.contains("### Instructions") {
            format!("Strategy: keep the strongest ops of both references.\n<tr>{code}</tr>")
        } else {
            format!("<tr>{code}</tr>")
        }
    }
}

impl CandidateGenerator for RecombiningMock {
    fn generate(&self, requests: &[GenerationRequest], _params: &SamplingParams) -> Vec<Result<String, SlotError>> {
        requests.iter().map(|r| Ok(self.respond(&r.prompt, r.seed))).collect()
    }
}

/// Replays a fixed list of outcomes, cycling, one per request across calls.
#[derive(Debug, Default)]
pub struct ScriptedGenerator {
    outputs: Vec<Result<String, SlotError>>,
    cursor: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new(outputs: Vec<Result<String, SlotError>>) -> Self {
        assert!(!outputs.is_empty(), "script needs at least one output");
        ScriptedGenerator { outputs, cursor: AtomicUsize::new(0) }
    }

    pub fn texts<I: IntoIterator<Item = S>, S: Into<String>>(texts: I) -> Self {
        Self::new(texts.into_iter().map(|t| Ok(t.into())).collect())
    }
}

impl CandidateGenerator for ScriptedGenerator {
    fn generate(&self, requests: &[GenerationRequest], _params: &SamplingParams) -> Vec<Result<String, SlotError>> {
        let start = self.cursor.fetch_add(requests.len(), Ordering::SeqCst);
        (0..requests.len()).map(|i| self.outputs[(start + i) % self.outputs.len()].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::check_response;
    use crate::gateway::{render_prompt, Bindings, Placeholder, TemplateId};
    use crate::transform_space::FixedTail;

    fn prompt(template: TemplateId) -> String {
        let a = render_compose(&["RandomPosterize(bits=4, p=0.3)".into()], &FixedTail::default(), (64, 64));
        let b = render_compose(
            &["ColorJitter(brightness=0.2, contrast=0.1, saturation=0.3, hue=0.05)".into(), "RandomHorizontalFlip(p=0.5)".into()],
            &FixedTail::default(),
            (128, 128),
        );
        let bindings = Bindings::from([
            (Placeholder::Accuracy, "0.5312".into()),
            (Placeholder::TransformCode, a),
            (Placeholder::AddonAccuracy, "0.5520".into()),
            (Placeholder::AddonTransformCode, b),
        ]);
        render_prompt(template, &bindings).unwrap()
    }

    #[test]
    fn deterministic_per_prompt_and_seed() {
        let mock = RecombiningMock::default();
        let p = prompt(TemplateId::GenerateDirect);
        assert_eq!(mock.respond(&p, 3), mock.respond(&p, 3));
        let distinct: std::collections::HashSet<_> = (0..20).map(|s| mock.respond(&p, s)).collect();
        assert!(distinct.len() > 5);
    }

    #[test]
    fn mostly_valid_and_reuses_references() {
        let mock = RecombiningMock::default();
        for template in [TemplateId::GenerateDirect, TemplateId::GenerateCot] {
            let p = prompt(template);
            let mut valid = 0;
            let mut reused = 0;
            for seed in 0..200 {
                let out = mock.respond(&p, seed);
                let report = check_response(&out);
                if report.is_valid() {
                    valid += 1;
                    let code = report.extracted_code.unwrap();
                    if code.contains("RandomPosterize") || code.contains("ColorJitter") || code.contains("RandomHorizontalFlip") {
                        reused += 1;
                    }
                }
            }
            assert!((150..200).contains(&valid), "{template}: {valid}");
            assert!(reused > valid * 2 / 3, "{template}: {reused}/{valid}");
        }
    }

    #[test]
    fn scripted_cycles_across_calls() {
        let g = ScriptedGenerator::new(vec![Ok("a".into()), Err(SlotError::Timeout)]);
        let reqs = vec![GenerationRequest { prompt: String::new(), seed: 0 }; 3];
        let first = g.generate(&reqs, &SamplingParams::default());
        assert_eq!(first, vec![Ok("a".into()), Err(SlotError::Timeout), Ok("a".into())]);
        assert_eq!(g.generate(&reqs[..1], &SamplingParams::default()), vec![Err(SlotError::Timeout)]);
    }
}
