//! The `loop` command: one run directory per invocation.
//!
//! ```text
//! runs/<name>/
//!   manifest.json        settings, base-store digest, status
//!   store.jsonl          base store import plus every generated candidate
//!   attempts.jsonl       one line per generation slot
//!   stats.csv            one row per completed epoch
//!   datasets/            latest fine-tune dataset (all with --keep-datasets)
//!   finetune/            one job spec per epoch
//!   report.json, density_early.tsv, density_late.tsv
//! ```

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use augloop_core::codec::digest_of;
use augloop_core::controller::{
    run_loop, FinetuneJobSpec, FinetuneSink, LoopConfig, LoopState, ReferenceStrategy,
};
use augloop_core::eval::Evaluator;
use augloop_core::gateway::{CandidateGenerator, SamplingParams};
use augloop_core::mock_llm::RecombiningMock;
use augloop_core::repository::PromptMode;
use augloop_core::stats::{loop_report, stats_csv, EpochStats};
use augloop_core::{Repository, SurrogateEvaluator};
use augloop_net::{ChatClient, ChatClientConfig, FinetuneClient};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{EvaluatorArg, GeneratorArg, LoopArgs, PromptArg, ReferencesArg, WorkerArgs};
use crate::brute::scheduler;
use crate::output::{read_json, resolve, write_json, write_text, Manifest};
use crate::pairs_cmd::{curation, policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSettings {
    pub url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub attempts: u32,
    pub parallelism: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSettings {
    pub url: String,
    pub in_flight: u32,
    pub timeout_secs: u64,
}

impl WorkerSettings {
    fn args(&self) -> WorkerArgs {
        WorkerArgs { worker_url: self.url.clone(), in_flight: self.in_flight, eval_timeout: self.timeout_secs }
    }
}

/// Everything needed to repeat a run, as recorded in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub run: String,
    pub config: LoopConfig,
    pub generator: GeneratorArg,
    pub evaluator: EvaluatorArg,
    #[serde(default)]
    pub llm: Option<LlmSettings>,
    #[serde(default)]
    pub worker: Option<WorkerSettings>,
    pub base_store: String,
    /// Digest of the base store's export, filled in when the run starts.
    #[serde(default)]
    pub base_store_digest: String,
    pub keep_datasets: bool,
}

fn settings_from_args(workdir: &Path, args: &LoopArgs) -> Result<LoopSettings> {
    if args.evaluator == EvaluatorArg::None {
        bail!("the loop needs an evaluator: use --evaluator surrogate or --evaluator worker");
    }
    let config = LoopConfig {
        n_epochs: args.epochs,
        candidates_per_epoch: args.per_epoch as usize,
        filter_threshold: args.threshold,
        prompt_mode: match args.prompt {
            PromptArg::Direct => PromptMode::Direct,
            PromptArg::Cot => PromptMode::Cot,
        },
        curation_mode: curation(args.mode),
        sampling: SamplingParams {
            temperature: args.temperature,
            top_p: args.top_p,
            top_k: args.top_k,
            max_new_tokens: args.max_new_tokens,
        },
        reference_seed: args.reference_seed,
        pairing_seed: args.pairing_seed,
        generation_seed: args.generation_seed,
        pair_policy: policy(args.policy),
        augment_fraction: args.augment_fraction,
        reference_strategy: match args.references {
            ReferencesArg::Fresh => ReferenceStrategy::FreshPerCandidate,
            ReferencesArg::Shared => ReferenceStrategy::SharedPerEpoch,
        },
        top_up: args.top_up,
        synchronous_finetune: args.synchronous_finetune,
        ..LoopConfig::default()
    };
    let needs_worker = args.evaluator == EvaluatorArg::Worker || args.synchronous_finetune;
    Ok(LoopSettings {
        run: args.run.clone(),
        config,
        generator: args.generator,
        evaluator: args.evaluator,
        llm: (args.generator == GeneratorArg::Http).then(|| LlmSettings {
            url: args.llm_url.clone(),
            model: args.llm_model.clone(),
            timeout_secs: args.llm_timeout,
            attempts: args.llm_attempts,
            parallelism: args.llm_parallelism,
        }),
        worker: needs_worker.then(|| WorkerSettings {
            url: args.worker.worker_url.clone(),
            in_flight: args.worker.in_flight,
            timeout_secs: args.worker.eval_timeout,
        }),
        base_store: resolve(workdir, &args.base_store).display().to_string(),
        base_store_digest: String::new(),
        keep_datasets: args.keep_datasets,
    })
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Writes each epoch's dataset and job spec into the run directory, and
/// posts the job to the worker when fine-tuning is synchronous.
struct RunDirSink {
    dir: PathBuf,
    keep_datasets: bool,
    previous: Option<PathBuf>,
    client: Option<FinetuneClient>,
}

impl RunDirSink {
    fn write(&mut self, spec: &FinetuneJobSpec, dataset: &str) -> Result<FinetuneJobSpec> {
        let dataset_path = self.dir.join(&spec.dataset_path);
        write_text(&dataset_path, dataset)?;
        if !self.keep_datasets {
            if let Some(prev) = self.previous.take() {
                if prev != dataset_path {
                    std::fs::remove_file(&prev).with_context(|| format!("removing {}", prev.display()))?;
                }
            }
        }
        self.previous = Some(dataset_path.clone());
        let job = FinetuneJobSpec {
            dataset_path: absolute(&dataset_path).display().to_string(),
            output_adapter_path: absolute(&self.dir.join(&spec.output_adapter_path)).display().to_string(),
            ..spec.clone()
        };
        write_json(&self.dir.join(format!("finetune/epoch_{:03}.json", spec.epoch)), &job)?;
        Ok(job)
    }
}

impl FinetuneSink for RunDirSink {
    fn submit(&mut self, spec: &FinetuneJobSpec, dataset: &str) -> Result<(), String> {
        let job = self.write(spec, dataset).map_err(|e| format!("{e:#}"))?;
        if let Some(client) = &self.client {
            let resp = client.submit(&job).map_err(|e| e.to_string())?;
            log::info!("epoch {} adapter: {}", job.epoch, resp.adapter_path);
        }
        Ok(())
    }
}

fn build_generator(settings: &LoopSettings, api_key: Option<String>) -> Result<Box<dyn CandidateGenerator>> {
    Ok(match settings.generator {
        GeneratorArg::Mock => Box::new(RecombiningMock::default()),
        GeneratorArg::Http => {
            let llm = settings.llm.as_ref().ok_or_else(|| anyhow!("manifest lacks LLM settings"))?;
            Box::new(ChatClient::new(ChatClientConfig {
                api_key,
                model: llm.model.clone(),
                timeout: Duration::from_secs(llm.timeout_secs),
                max_attempts: llm.attempts,
                parallelism: llm.parallelism as usize,
                ..ChatClientConfig::new(llm.url.clone())
            })?)
        }
    })
}

fn build_evaluator(settings: &LoopSettings) -> Result<Box<dyn Evaluator>> {
    Ok(match settings.evaluator {
        EvaluatorArg::Surrogate => Box::new(SurrogateEvaluator::default()),
        EvaluatorArg::Worker => {
            let w = settings.worker.as_ref().ok_or_else(|| anyhow!("manifest lacks worker settings"))?;
            Box::new(scheduler(&w.args())?)
        }
        EvaluatorArg::None => bail!("the loop needs an evaluator"),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn run(workdir: &Path, argv: &[String], args: &LoopArgs) -> Result<()> {
    let settings = match &args.replay {
        Some(path) => {
            let mut path = resolve(workdir, path);
            if path.is_dir() {
                path = path.join("manifest.json");
            }
            let recorded: Manifest<LoopSettings> = read_json(&path)?;
            let mut s = recorded.settings;
            s.run = if args.run != "run" { args.run.clone() } else { format!("{}-replay", s.run) };
            s
        }
        None => settings_from_args(workdir, args)?,
    };
    execute(workdir, argv, settings, args.force, args.llm_api_key.clone())
}

fn execute(workdir: &Path, argv: &[String], mut settings: LoopSettings, force: bool, api_key: Option<String>) -> Result<()> {
    settings.config.check().map_err(|e| anyhow!("invalid loop settings: {e}"))?;
    let run_dir = workdir.join("runs").join(&settings.run);
    if run_dir.exists() {
        if !force {
            bail!("run directory {} exists; pass --force to replace it or choose another --run", run_dir.display());
        }
        std::fs::remove_dir_all(&run_dir).with_context(|| format!("removing {}", run_dir.display()))?;
    }

    let base_path = PathBuf::from(&settings.base_store);
    if !base_path.exists() {
        bail!("base store {} not found; run `augloop brute` first", base_path.display());
    }
    let base = Repository::open(&base_path)?;
    if base.is_empty() {
        bail!("base store {} is empty", base_path.display());
    }
    let export = base.export_string();
    let digest = digest_of(&export);
    if !settings.base_store_digest.is_empty() && settings.base_store_digest != digest {
        bail!("base store {} changed since the recorded run (digest {digest}, expected {})", base_path.display(), settings.base_store_digest);
    }
    settings.base_store_digest = digest;

    std::fs::create_dir_all(&run_dir)?;
    let mut repo = Repository::open(run_dir.join("store.jsonl"))?;
    repo.import_str(&export)?;
    let mut state = LoopState::new(repo);

    let manifest_path = run_dir.join("manifest.json");
    let mut manifest = Manifest::new("loop", argv, settings.clone());
    write_json(&manifest_path, &manifest)?;

    let generator = build_generator(&settings, api_key)?;
    let evaluator = build_evaluator(&settings)?;
    let client = match (&settings.worker, settings.config.synchronous_finetune) {
        (Some(w), true) => Some(FinetuneClient::new(w.url.clone(), Duration::from_secs(w.timeout_secs))?),
        _ => None,
    };
    let mut sink = RunDirSink { dir: run_dir.clone(), keep_datasets: settings.keep_datasets, previous: None, client };

    let stats_path = run_dir.join("stats.csv");
    write_text(&stats_path, &stats_csv(&[]))?;
    let attempts_path = run_dir.join("attempts.jsonl");
    let mut attempts_file = File::create(&attempts_path)?;
    let mut seen: Vec<EpochStats> = Vec::new();
    let mut write_error: Option<anyhow::Error> = None;
    let n_epochs = settings.config.n_epochs;
    let started = Instant::now();

    let mut on_epoch = |report: &augloop_core::controller::EpochReport| {
        seen.push(report.stats.clone());
        let s = &report.stats;
        eprintln!(
            "epoch {}/{n_epochs}: valid {}/{} admitted {} mean {} max {} pairs {}+{}",
            s.epoch_index + 1,
            s.n_valid,
            s.n_generated,
            s.n_admitted,
            fmt_opt(s.mean_accuracy),
            fmt_opt(s.max_accuracy),
            report.n_pairs,
            report.n_augmented
        );
        if write_error.is_some() {
            return;
        }
        let mut lines = String::new();
        for a in &report.attempts {
            lines.push_str(&serde_json::to_string(a).expect("attempt serializes"));
            lines.push('\n');
        }
        let res = attempts_file
            .write_all(lines.as_bytes())
            .map_err(anyhow::Error::from)
            .and_then(|_| write_text(&stats_path, &stats_csv(&seen)));
        if let Err(e) = res {
            write_error = Some(e);
        }
    };
    let outcome = run_loop(&mut state, &settings.config, 0, generator.as_ref(), evaluator.as_ref(), &mut sink, &mut on_epoch);
    if let Some(e) = write_error {
        return Err(e.context("writing run outputs"));
    }

    let report = loop_report(&outcome.stats);
    write_json(&run_dir.join("report.json"), &report)?;
    if let Some(d) = &report.early_density {
        write_text(&run_dir.join("density_early.tsv"), &d.to_columns())?;
    }
    if let Some(d) = &report.late_density {
        write_text(&run_dir.join("density_late.tsv"), &d.to_columns())?;
    }
    // Tag validity: a reply passed the structural checks. Execution validity:
    // it also came back from evaluation with an accuracy.
    let n_attempts = outcome.attempts.len().max(1) as f64;
    let tag_valid = outcome.attempts.iter().filter(|a| a.generation_error.is_none() && a.violations.is_empty()).count();
    let exec_valid = outcome.attempts.iter().filter(|a| a.violations.is_empty() && a.accuracy.is_some()).count();
    let status = if outcome.halted.is_some() { "halted" } else { "completed" };
    let best = outcome.stats.iter().filter_map(|s| s.max_accuracy).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    manifest.finish(
        status,
        json!({
            "epochs_completed": outcome.stats.len(),
            "halted": outcome.halted.as_ref().map(|(e, err)| json!({"epoch": e, "error": err.to_string(), "state_unchanged": err.state_unchanged()})),
            "store_records": state.repo.len(),
            "pool_size": state.pool.len(),
            "best_accuracy": best,
            "tag_validity_rate": tag_valid as f64 / n_attempts,
            "execution_validity_rate": exec_valid as f64 / n_attempts,
            "r_epoch_means": report.r_epoch_means,
            "r_all_candidates": report.r_all_candidates,
            "seconds": started.elapsed().as_secs_f64(),
        }),
    );
    write_json(&manifest_path, &manifest)?;

    print!("{}", stats_csv(&outcome.stats));
    println!(
        "tag-valid {:.1}%  execution-valid {:.1}%  r(epoch, mean) = {}  r(epoch, candidate) = {}  best = {}  run dir {}",
        100.0 * tag_valid as f64 / n_attempts,
        100.0 * exec_valid as f64 / n_attempts,
        fmt_opt(report.r_epoch_means),
        fmt_opt(report.r_all_candidates),
        fmt_opt(best),
        run_dir.display()
    );
    if let Some((epoch, err)) = outcome.halted {
        bail!("epoch {epoch} aborted: {err}; {} completed epochs kept in {}", outcome.stats.len(), run_dir.display());
    }
    Ok(())
}
