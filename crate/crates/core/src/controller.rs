//! The generate, evaluate, filter, fine-tune loop.
//!
//! Each epoch draws references from the fine-tune pool, asks the generator
//! for candidates, evaluates the valid ones, commits every attempt to the
//! repository in one batch, admits strong candidates to the pool and hands
//! a fresh dataset plus job spec to a [`FinetuneSink`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{canonicalize, check_response, digest_of, Violation};
use crate::eval::{ErrorClass, EvalConfig, EvalError, EvalJob, Evaluator};
use crate::gateway::{
    reference_bindings, render_prompt, select_references, CandidateGenerator, GenerationRequest, SamplingParams,
    SelectionError, SlotError, TemplateId,
};
use crate::pairs::{augment_resize256, build_pairs, curate, render_dataset, PairError, PairPolicy};
use crate::repository::{now_millis, CurationMode, InsertOutcome, NewRecord, PromptMode, RepoError, Repository, Source};
use crate::stats::EpochStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceStrategy {
    /// A new reference pair for every candidate slot.
    #[default]
    FreshPerCandidate,
    /// One reference pair shared by every slot of an epoch.
    SharedPerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub n_epochs: u32,
    pub candidates_per_epoch: usize,
    /// Candidates strictly above this accuracy join the fine-tune pool.
    pub filter_threshold: f64,
    pub prompt_mode: PromptMode,
    pub curation_mode: CurationMode,
    pub sampling: SamplingParams,
    pub reference_seed: u64,
    pub pairing_seed: u64,
    pub generation_seed: u64,
    pub pair_policy: PairPolicy,
    pub augment_fraction: f64,
    pub reference_strategy: ReferenceStrategy,
    /// Re-request failed or invalid slots (at most two extra rounds).
    pub top_up: bool,
    /// Halt the loop when the fine-tune sink reports failure.
    pub synchronous_finetune: bool,
    pub eval_config: EvalConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            n_epochs: 28,
            candidates_per_epoch: 10,
            filter_threshold: 0.55,
            prompt_mode: PromptMode::Direct,
            curation_mode: CurationMode::Curated,
            sampling: SamplingParams::default(),
            reference_seed: 0,
            pairing_seed: 0,
            generation_seed: 0,
            pair_policy: PairPolicy::UniformBetter,
            augment_fraction: 0.5,
            reference_strategy: ReferenceStrategy::FreshPerCandidate,
            top_up: false,
            synchronous_finetune: false,
            eval_config: EvalConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.n_epochs == 0 {
            return Err("n_epochs must be at least 1".into());
        }
        if self.candidates_per_epoch == 0 {
            return Err("candidates_per_epoch must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) {
            return Err(format!("filter_threshold {} outside [0, 1]", self.filter_threshold));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(format!("augment_fraction {} outside [0, 1]", self.augment_fraction));
        }
        self.sampling.check()
    }

    pub fn template(&self) -> TemplateId {
        match self.prompt_mode {
            PromptMode::Direct => TemplateId::GenerateDirect,
            PromptMode::Cot => TemplateId::GenerateCot,
        }
    }
}

/// Adapter and optimizer settings for one fine-tuning round. Key names are
/// the ones the training worker reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraHyperparameters {
    pub r: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub bias: String,
    pub target_modules: Vec<String>,
    pub optimizer: String,
    pub learning_rate: f64,
    pub lr_scheduler_type: String,
    pub warmup_ratio: f64,
    pub num_train_epochs: u32,
    pub per_device_train_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub effective_batch_size: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_new_tokens: u32,
}

impl Default for LoraHyperparameters {
    fn default() -> Self {
        let sampling = SamplingParams::default();
        LoraHyperparameters {
            r: 32,
            lora_alpha: 32,
            lora_dropout: 0.05,
            bias: "none".into(),
            target_modules: ["q_proj", "k_proj", "v_proj", "o_proj"].map(String::from).to_vec(),
            optimizer: "paged_adamw_8bit".into(),
            learning_rate: 1.5e-4,
            lr_scheduler_type: "cosine".into(),
            warmup_ratio: 0.05,
            num_train_epochs: 3,
            per_device_train_batch_size: 1,
            gradient_accumulation_steps: 8,
            effective_batch_size: 8,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            top_k: sampling.top_k,
            max_new_tokens: sampling.max_new_tokens,
        }
    }
}

impl LoraHyperparameters {
    pub fn check(&self) -> Result<(), String> {
        if self.per_device_train_batch_size * self.gradient_accumulation_steps != self.effective_batch_size {
            return Err(format!(
                "effective batch {} != {} x {}",
                self.effective_batch_size, self.per_device_train_batch_size, self.gradient_accumulation_steps
            ));
        }
        Ok(())
    }
}

/// `POST /finetune` body and the per-epoch job file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJobSpec {
    pub epoch: u32,
    pub dataset_path: String,
    pub output_adapter_path: String,
    pub n_samples: usize,
    pub hyperparameters: LoraHyperparameters,
}

impl FinetuneJobSpec {
    pub fn for_epoch(epoch: u32, n_samples: usize) -> Self {
        FinetuneJobSpec {
            epoch,
            dataset_path: format!("datasets/epoch_{epoch:03}.jsonl"),
            output_adapter_path: format!("adapters/epoch_{epoch:03}"),
            n_samples,
            hyperparameters: LoraHyperparameters::default(),
        }
    }
}

/// Receives each epoch's dataset and job spec.
pub trait FinetuneSink {
    fn submit(&mut self, spec: &FinetuneJobSpec, dataset: &str) -> Result<(), String>;
}

/// Keeps specs and dataset sizes in memory.
#[derive(Debug, Default)]
pub struct RecordingSink {
    pub jobs: Vec<(FinetuneJobSpec, usize)>,
}

impl FinetuneSink for RecordingSink {
    fn submit(&mut self, spec: &FinetuneJobSpec, dataset: &str) -> Result<(), String> {
        self.jobs.push((spec.clone(), dataset.len()));
        Ok(())
    }
}

/// One generation slot, as written to the attempts log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub epoch: u32,
    pub slot: usize,
    pub ref_a: u64,
    pub ref_b: u64,
    pub generation_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_error: Option<SlotError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_error: Option<ErrorClass>,
    /// Id of the stored record, or of the earlier record it duplicates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<u64>,
    pub duplicate: bool,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub stats: EpochStats,
    pub attempts: Vec<Attempt>,
    pub finetune: FinetuneJobSpec,
    pub n_pairs: usize,
    pub n_augmented: usize,
}

#[derive(Debug, Error)]
pub enum EpochError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error(transparent)]
    References(#[from] SelectionError),
    #[error("generation backend down: {0}")]
    GeneratorDown(String),
    #[error("evaluation worker down: {0}")]
    WorkerDown(String),
    #[error(transparent)]
    Evaluator(#[from] EvalError),
    #[error(transparent)]
    Store(#[from] RepoError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error("fine-tune submission failed: {0}")]
    Finetune(String),
}

impl EpochError {
    /// True when the epoch was abandoned before anything was committed.
    pub fn state_unchanged(&self) -> bool {
        !matches!(self, EpochError::Pairs(_) | EpochError::Finetune(_))
    }
}

/// Repository plus the ids of records that form the fine-tune pool.
#[derive(Debug)]
pub struct LoopState {
    pub repo: Repository,
    pub pool: BTreeSet<u64>,
}

impl LoopState {
    /// Starts from an existing store: every evaluated, error-free record
    /// joins the pool.
    pub fn new(repo: Repository) -> Self {
        let pool = repo.records().iter().filter(|r| r.accuracy.is_some() && !r.is_error()).map(|r| r.record_id).collect();
        LoopState { repo, pool }
    }
}

/// SplitMix64 over (base, epoch, slot), so every slot gets its own stream.
pub fn derive_seed(base: u64, epoch: u32, slot: usize) -> u64 {
    let mut z = base ^ ((epoch as u64) << 32 | slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Slot {
    attempt: Attempt,
    text: Option<String>,
}

fn generate_round(
    state: &LoopState,
    config: &LoopConfig,
    epoch: u32,
    first_slot: usize,
    n: usize,
    generator: &dyn CandidateGenerator,
) -> Result<Vec<Slot>, EpochError> {
    let pool: Vec<_> = state.pool.iter().filter_map(|id| state.repo.get(*id)).collect();
    let mut requests = Vec::with_capacity(n);
    let mut attempts = Vec::with_capacity(n);
    for slot in first_slot..first_slot + n {
        let ref_slot = match config.reference_strategy {
            ReferenceStrategy::FreshPerCandidate => slot,
            ReferenceStrategy::SharedPerEpoch => 0,
        };
        let sel = select_references(pool.iter().copied(), derive_seed(config.reference_seed, epoch, ref_slot))?;
        let (a, b) = (state.repo.get(sel.ref_a).unwrap(), state.repo.get(sel.ref_b).unwrap());
        let prompt = render_prompt(config.template(), &reference_bindings(a, b)).expect("generation bindings are complete");
        let seed = derive_seed(config.generation_seed, epoch, slot);
        requests.push(GenerationRequest { prompt, seed });
        attempts.push(Attempt {
            epoch,
            slot,
            ref_a: sel.ref_a,
            ref_b: sel.ref_b,
            generation_seed: seed,
            generation_error: None,
            violations: vec![],
            accuracy: None,
            eval_error: None,
            record_id: None,
            duplicate: false,
            admitted: false,
        });
    }
    let outputs = generator.generate(&requests, &config.sampling);
    if outputs.len() != n {
        return Err(EpochError::GeneratorDown(format!("backend returned {} results for {n} requests", outputs.len())));
    }
    if outputs.iter().all(|o| o.as_ref().is_err_and(|e| e.is_connectivity())) {
        let first = outputs[0].as_ref().unwrap_err();
        return Err(EpochError::GeneratorDown(first.to_string()));
    }
    Ok(attempts
        .into_iter()
        .zip(outputs)
        .map(|(mut attempt, out)| match out {
            Ok(text) => Slot { attempt, text: Some(text) },
            Err(e) => {
                attempt.generation_error = Some(e);
                Slot { attempt, text: None }
            }
        })
        .collect())
}

/// Runs one epoch. On `Err` with [`EpochError::state_unchanged`] nothing was
/// written to the repository or the pool.
pub fn run_epoch(
    state: &mut LoopState,
    config: &LoopConfig,
    epoch: u32,
    generator: &dyn CandidateGenerator,
    evaluator: &dyn Evaluator,
    sink: &mut dyn FinetuneSink,
) -> Result<EpochReport, EpochError> {
    config.check().map_err(EpochError::Config)?;
    let n = config.candidates_per_epoch;
    let mut slots = generate_round(state, config, epoch, 0, n, generator)?;
    if config.top_up {
        for _ in 0..2 {
            let missing = n - slots.iter().filter(|s| s.text.as_deref().is_some_and(|t| check_response(t).is_valid())).count();
            if missing == 0 {
                break;
            }
            let more = generate_round(state, config, epoch, slots.len(), missing, generator)?;
            slots.extend(more);
        }
    }

    // Validate, then evaluate everything that passed.
    let mut codes: Vec<Option<String>> = Vec::with_capacity(slots.len());
    let mut jobs = Vec::new();
    let mut job_slots = Vec::new();
    for (i, slot) in slots.iter_mut().enumerate() {
        let Some(text) = &slot.text else {
            codes.push(None);
            continue;
        };
        let report = check_response(text);
        slot.attempt.violations = report.violations.clone();
        let code = report.extracted_code.clone().unwrap_or_else(|| text.clone());
        if report.is_valid() {
            jobs.push(EvalJob {
                job_id: format!("e{epoch:03}-c{:03}", slot.attempt.slot),
                code: code.clone(),
                config: config.eval_config.clone(),
                submitted_at: now_millis(),
            });
            job_slots.push(i);
        }
        codes.push(Some(code));
    }
    if !jobs.is_empty() {
        let results = evaluator.evaluate(&jobs)?;
        if let Some(down) = results.iter().find(|r| r.error_class() == Some(ErrorClass::WorkerUnreachable)) {
            return Err(EpochError::WorkerDown(format!("job {}", down.job_id)));
        }
        for (result, &i) in results.iter().zip(&job_slots) {
            slots[i].attempt.accuracy = result.accuracy_value();
            slots[i].attempt.eval_error = result.error_class();
        }
    }

    // Commit all attempts that produced text, in one batch.
    let mut batch = Vec::new();
    let mut batch_slots = Vec::new();
    for (i, (slot, code)) in slots.iter().zip(&codes).enumerate() {
        let Some(code) = code else { continue };
        let digest = canonicalize(code).map(|c| c.digest).unwrap_or_else(|_| digest_of(code));
        let report_violations = slot.attempt.violations.clone();
        batch.push(NewRecord {
            code: code.clone(),
            digest,
            source: Source::Llm { epoch, prompt_mode: config.prompt_mode },
            validity: if report_violations.is_empty() {
                crate::codec::ValidityStatus::Valid
            } else {
                crate::codec::ValidityStatus::Invalid
            },
            violations: report_violations,
            accuracy: slot.attempt.accuracy,
            eval_error: slot.attempt.eval_error,
            eval_config: config.eval_config.clone(),
            created_at: now_millis(),
        });
        batch_slots.push(i);
    }
    let outcomes = state.repo.insert_batch(batch, config.curation_mode)?;
    for (outcome, &i) in outcomes.iter().zip(&batch_slots) {
        let attempt = &mut slots[i].attempt;
        match *outcome {
            InsertOutcome::Stored(id) => attempt.record_id = Some(id),
            InsertOutcome::Duplicate(id) => {
                attempt.record_id = Some(id);
                attempt.duplicate = true;
            }
            InsertOutcome::Rejected => {}
        }
        if let (Some(acc), Some(id)) = (attempt.accuracy, attempt.record_id) {
            if acc > config.filter_threshold && state.repo.get(id).is_some_and(|r| !r.is_error()) {
                state.pool.insert(id);
                attempt.admitted = true;
            }
        }
    }

    let accuracies: Vec<f64> = slots.iter().filter(|s| s.attempt.violations.is_empty()).filter_map(|s| s.attempt.accuracy).collect();
    let mut stats = EpochStats::from_accuracies(epoch, slots.len(), accuracies, config.filter_threshold);
    stats.n_admitted = slots.iter().filter(|s| s.attempt.admitted).count();

    // Rebuild the dataset from the grown pool.
    let pool_records: Vec<_> = state.pool.iter().filter_map(|id| state.repo.get(*id)).cloned().collect();
    let curated: Vec<_> = curate(&pool_records, config.curation_mode).into_iter().filter(|r| r.accuracy.is_some()).collect();
    let pairing_seed = derive_seed(config.pairing_seed, epoch, 0);
    let mut pairs = build_pairs(&curated, config.pair_policy, pairing_seed)?;
    let augmented = augment_resize256(&pairs, config.augment_fraction, pairing_seed)?;
    let (n_pairs, n_augmented) = (pairs.len(), augmented.pairs.len());
    pairs.extend(augmented.pairs);
    let dataset = render_dataset(&pairs);
    let finetune = FinetuneJobSpec::for_epoch(epoch, pairs.len());
    let attempts: Vec<Attempt> = slots.into_iter().map(|s| s.attempt).collect();
    if let Err(e) = sink.submit(&finetune, &dataset) {
        if config.synchronous_finetune {
            return Err(EpochError::Finetune(e));
        }
        log::warn!("fine-tune submission for epoch {epoch} failed: {e}");
    }
    Ok(EpochReport { stats, attempts, finetune, n_pairs, n_augmented })
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub stats: Vec<EpochStats>,
    pub attempts: Vec<Attempt>,
    /// Set when an epoch failed; `stats` holds the completed epochs.
    pub halted: Option<(u32, EpochError)>,
}

/// Runs `config.n_epochs` epochs starting at `first_epoch`. `on_epoch` sees
/// every completed epoch, so callers can persist progress as it happens.
pub fn run_loop(
    state: &mut LoopState,
    config: &LoopConfig,
    first_epoch: u32,
    generator: &dyn CandidateGenerator,
    evaluator: &dyn Evaluator,
    sink: &mut dyn FinetuneSink,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> LoopOutcome {
    let mut outcome = LoopOutcome { stats: Vec::new(), attempts: Vec::new(), halted: None };
    for epoch in first_epoch..first_epoch + config.n_epochs {
        match run_epoch(state, config, epoch, generator, evaluator, sink) {
            Ok(report) => {
                on_epoch(&report);
                outcome.stats.push(report.stats);
                outcome.attempts.extend(report.attempts);
            }
            Err(e) => {
                log::error!("epoch {epoch} aborted: {e}");
                outcome.halted = Some((epoch, e));
                break;
            }
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{EvalResult, SurrogateEvaluator};
    use crate::mock_llm::{RecombiningMock, ScriptedGenerator};
    use crate::repository::CandidateRecord;
    use crate::stats::stats_csv;
    use crate::transform_space::{default_catalog, enumerate_pipelines, render_compose, render_pipeline, FixedTail};
    use std::collections::HashMap;

    fn seeded_state(n_per_arity: usize) -> LoopState {
        let catalog = default_catalog();
        let surrogate = SurrogateEvaluator::default();
        let mut repo = Repository::in_memory();
        let mut batch = Vec::new();
        for arity in 1..=3 {
            for p in enumerate_pipelines(&catalog, arity, n_per_arity, 7).unwrap() {
                let code = render_pipeline(&catalog, &p).unwrap();
                batch.push(NewRecord {
                    digest: canonicalize(&code).unwrap().digest,
                    accuracy: surrogate.score(&code).ok(),
                    eval_error: surrogate.score(&code).err().map(|e| e.0),
                    code,
                    source: Source::Brute { arity: arity as u8 },
                    validity: crate::codec::ValidityStatus::Valid,
                    violations: vec![],
                    eval_config: EvalConfig::default(),
                    created_at: 0,
                });
            }
        }
        repo.insert_batch(batch, CurationMode::Unfiltered).unwrap();
        LoopState::new(repo)
    }

    /// Scores candidates by a marker comment `# acc=<x>` in their code.
    struct MarkerEvaluator;

    impl Evaluator for MarkerEvaluator {
        fn evaluate(&self, jobs: &[EvalJob]) -> Result<Vec<EvalResult>, EvalError> {
            Ok(jobs
                .iter()
                .map(|j| {
                    let acc = j.code.split("# acc=").nth(1).and_then(|s| s.split_whitespace().next()?.parse().ok()).unwrap_or(0.1);
                    EvalResult::accuracy(&j.job_id, acc)
                })
                .collect())
        }
    }

    struct DownEvaluator;

    impl Evaluator for DownEvaluator {
        fn evaluate(&self, jobs: &[EvalJob]) -> Result<Vec<EvalResult>, EvalError> {
            Ok(jobs.iter().map(|j| EvalResult::error(&j.job_id, ErrorClass::WorkerUnreachable, "refused")).collect())
        }
    }

    fn marked(acc: f64, tag: usize) -> String {
        let code = render_compose(&[format!("RandomRotation({tag})")], &FixedTail::default(), (64, 64));
        format!("<tr>{code}# acc={acc}\n</tr>")
    }

    fn small_config() -> LoopConfig {
        LoopConfig { n_epochs: 3, ..Default::default() }
    }

    #[test]
    fn defaults() {
        let c = LoopConfig::default();
        assert_eq!((c.n_epochs, c.candidates_per_epoch, c.filter_threshold), (28, 10, 0.55));
        assert_eq!(c.reference_strategy, ReferenceStrategy::FreshPerCandidate);
        assert!(!c.top_up);
        assert!(LoopConfig { n_epochs: 0, ..c.clone() }.check().is_err());
        assert!(LoopConfig { filter_threshold: 1.2, ..c }.check().is_err());
    }

    #[test]
    fn job_spec_values() {
        let spec = FinetuneJobSpec::for_epoch(4, 12);
        let json = serde_json::to_value(&spec).unwrap();
        let h = &json["hyperparameters"];
        assert_eq!(h["r"], 32);
        assert_eq!(h["lora_alpha"], 32);
        assert_eq!(h["lora_dropout"], 0.05);
        assert_eq!(h["optimizer"], "paged_adamw_8bit");
        assert_eq!(h["learning_rate"], 1.5e-4);
        assert_eq!(h["lr_scheduler_type"], "cosine");
        assert_eq!(h["target_modules"], serde_json::json!(["q_proj", "k_proj", "v_proj", "o_proj"]));
        assert_eq!(h["max_new_tokens"], 16 * 1024);
        assert_eq!(json["dataset_path"], "datasets/epoch_004.jsonl");
        spec.hyperparameters.check().unwrap();
    }

    #[test]
    fn scripted_epoch_counts() {
        let mut state = seeded_state(5);
        let texts: Vec<String> = (0..10).map(|i| marked(if i == 3 { 0.6 } else { 0.5 }, i)).collect();
        let generator = ScriptedGenerator::texts(texts);
        let mut sink = RecordingSink::default();
        let pool_before = state.pool.len();
        let report = run_epoch(&mut state, &small_config(), 0, &generator, &MarkerEvaluator, &mut sink).unwrap();
        let s = &report.stats;
        assert_eq!((s.n_generated, s.n_valid, s.n_admitted, s.max_accuracy), (10, 10, 1, Some(0.6)));
        assert_eq!(state.pool.len(), pool_before + 1);
        assert_eq!(sink.jobs.len(), 1);
        assert_eq!(sink.jobs[0].0.n_samples, report.n_pairs + report.n_augmented);
    }

    #[test]
    fn tagless_epoch() {
        let mut state = seeded_state(5);
        let generator = ScriptedGenerator::texts(["def transform(): pass"]);
        let before = state.repo.len();
        let report = run_epoch(&mut state, &small_config(), 0, &generator, &MarkerEvaluator, &mut RecordingSink::default()).unwrap();
        assert_eq!((report.stats.n_valid, report.stats.n_admitted, report.stats.mean_accuracy), (0, 0, None));
        // Curated mode does not store invalid responses.
        assert_eq!(state.repo.len(), before);
        let cfg = LoopConfig { curation_mode: CurationMode::Unfiltered, ..small_config() };
        run_epoch(&mut state, &cfg, 1, &generator, &MarkerEvaluator, &mut RecordingSink::default()).unwrap();
        assert_eq!(state.repo.len(), before + 10);
        assert!(state.repo.records()[before..].iter().all(|r| r.accuracy == Some(0.0)));
    }

    #[test]
    fn threshold_is_strict() {
        let mut state = seeded_state(5);
        let generator = ScriptedGenerator::texts([marked(0.55, 1), marked(0.5500001, 2)]);
        let report = run_epoch(&mut state, &small_config(), 0, &generator, &MarkerEvaluator, &mut RecordingSink::default()).unwrap();
        for a in &report.attempts {
            assert_eq!(a.admitted, a.accuracy.unwrap() > 0.55, "{a:?}");
        }
        // Ten slots cycle through the two scripted texts.
        assert_eq!(report.stats.n_admitted, 5);
        assert_eq!(report.attempts.iter().filter(|a| a.duplicate).count(), 8);
    }

    #[test]
    fn generator_down_leaves_state_unchanged() {
        let mut state = seeded_state(5);
        let generator = ScriptedGenerator::new(vec![Err(SlotError::Unreachable("connection refused".into()))]);
        let (len, pool) = (state.repo.len(), state.pool.clone());
        let err = run_epoch(&mut state, &small_config(), 0, &generator, &MarkerEvaluator, &mut RecordingSink::default()).unwrap_err();
        assert!(matches!(err, EpochError::GeneratorDown(_)) && err.state_unchanged());
        assert_eq!((state.repo.len(), &state.pool), (len, &pool));
    }

    #[test]
    fn partial_generation_failure_is_per_slot() {
        let mut state = seeded_state(5);
        let generator = ScriptedGenerator::new(vec![Ok(marked(0.6, 1)), Err(SlotError::Http(500))]);
        let report = run_epoch(&mut state, &small_config(), 0, &generator, &MarkerEvaluator, &mut RecordingSink::default()).unwrap();
        assert_eq!(report.stats.n_generated, 10);
        assert_eq!(report.attempts.iter().filter(|a| a.generation_error.is_some()).count(), 5);
    }

    #[test]
    fn worker_down_leaves_state_unchanged() {
        let mut state = seeded_state(5);
        let generator = ScriptedGenerator::texts([marked(0.6, 1)]);
        let len = state.repo.len();
        let err = run_epoch(&mut state, &small_config(), 0, &generator, &DownEvaluator, &mut RecordingSink::default()).unwrap_err();
        assert!(matches!(err, EpochError::WorkerDown(_)));
        assert_eq!(state.repo.len(), len);
        let out = run_loop(&mut state, &small_config(), 0, &generator, &DownEvaluator, &mut RecordingSink::default(), &mut |_| {});
        assert!(out.stats.is_empty());
        assert_eq!(out.halted.as_ref().map(|h| h.0), Some(0));
    }

    #[test]
    fn top_up_refills_invalid_slots() {
        let mut state = seeded_state(5);
        let generator = ScriptedGenerator::texts([marked(0.5, 1), "no tags".to_string()]);
        let cfg = LoopConfig { top_up: true, candidates_per_epoch: 4, ..small_config() };
        let report = run_epoch(&mut state, &cfg, 0, &generator, &MarkerEvaluator, &mut RecordingSink::default()).unwrap();
        assert!(report.stats.n_generated > 4);
        assert!(report.stats.n_valid >= 3);
    }

    #[test]
    fn shared_references() {
        let mut state = seeded_state(5);
        let cfg = LoopConfig { reference_strategy: ReferenceStrategy::SharedPerEpoch, ..small_config() };
        let report = run_epoch(&mut state, &cfg, 0, &RecombiningMock::default(), &SurrogateEvaluator::default(), &mut RecordingSink::default()).unwrap();
        let refs: BTreeSet<_> = report.attempts.iter().map(|a| (a.ref_a, a.ref_b)).collect();
        assert_eq!(refs.len(), 1);
    }

    #[test]
    fn mock_loop_invariants_and_replay() {
        let config = LoopConfig { n_epochs: 6, ..Default::default() };
        let run = || {
            let mut state = seeded_state(20);
            let start: BTreeSet<u64> = state.pool.clone();
            let out = run_loop(
                &mut state,
                &config,
                0,
                &RecombiningMock::default(),
                &SurrogateEvaluator::default(),
                &mut RecordingSink::default(),
                &mut |_| {},
            );
            (out, state, start)
        };
        let (out, state, start) = run();
        assert!(out.halted.is_none());
        assert_eq!(out.stats.len(), 6);
        assert_eq!(out.stats.iter().map(|s| s.n_generated).sum::<usize>(), 60);
        for s in &out.stats {
            assert!(s.n_admitted <= s.n_valid && s.n_valid <= s.n_generated);
        }
        // Everything added to the pool beats the threshold.
        for id in state.pool.difference(&start) {
            assert!(state.repo.get(*id).unwrap().accuracy.unwrap() > 0.55);
        }
        // Per-epoch stats agree with the stored records.
        let mut by_epoch: HashMap<u32, Vec<&CandidateRecord>> = HashMap::new();
        for r in state.repo.records() {
            if let Source::Llm { epoch, .. } = r.source {
                by_epoch.entry(epoch).or_default().push(r);
            }
        }
        for s in &out.stats {
            let mine: Vec<&Attempt> = out.attempts.iter().filter(|a| a.epoch == s.epoch_index && a.accuracy.is_some()).collect();
            let accs: Vec<f64> = mine.iter().map(|a| state.repo.get(a.record_id.unwrap()).unwrap().accuracy.unwrap()).collect();
            if let Some(m) = s.mean_accuracy {
                assert!((accs.iter().sum::<f64>() / accs.len() as f64 - m).abs() < 1e-12);
            }
        }
        let (again, _, _) = run();
        assert_eq!(stats_csv(&out.stats), stats_csv(&again.stats));
        assert_eq!(out.attempts, again.attempts);
    }

    #[test]
    fn seeds_differ_per_slot() {
        let seeds: BTreeSet<u64> = (0..28).flat_map(|e| (0..10).map(move |s| derive_seed(1, e, s))).collect();
        assert_eq!(seeds.len(), 280);
    }
}
