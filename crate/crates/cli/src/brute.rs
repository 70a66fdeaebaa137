use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use augloop_core::codec::digest_of;
use augloop_core::eval::{EvalConfig, EvalJob, EvalResult, Evaluator};
use augloop_core::repository::{now_millis, InsertOutcome};
use augloop_core::transform_space::candidate_file_name;
use augloop_core::{
    canonicalize, check_response, default_catalog, enumerate_pipelines, render_pipeline, Catalog, CurationMode,
    ErrorClass, NewRecord, Repository, Source, SurrogateEvaluator,
};
use augloop_net::{EvalScheduler, SchedulerConfig};
use serde::Serialize;
use serde_json::json;

use crate::args::{BruteArgs, EvaluatorArg, WorkerArgs};
use crate::output::{resolve, summarize, write_json, write_text, Manifest};

#[derive(Debug, Serialize)]
struct BruteSettings {
    arities: Vec<usize>,
    count: u64,
    seed: u64,
    evaluator: EvaluatorArg,
    worker_url: Option<String>,
    store: String,
    catalog: String,
    catalog_version: String,
    catalog_digest: String,
}

pub fn load_catalog(workdir: &Path, path: Option<&Path>) -> Result<Catalog> {
    let Some(path) = path else { return Ok(default_catalog()) };
    let path = resolve(workdir, path);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading catalog {}", path.display()))?;
    let catalog = Catalog::from_toml(&text).with_context(|| format!("catalog {}", path.display()))?;
    catalog.check()?;
    Ok(catalog)
}

pub fn scheduler(worker: &WorkerArgs) -> Result<EvalScheduler> {
    Ok(EvalScheduler::new(SchedulerConfig {
        base_url: worker.worker_url.clone(),
        max_in_flight: worker.in_flight as usize,
        job_timeout: Duration::from_secs(worker.eval_timeout),
    })?)
}

pub fn run(workdir: &Path, argv: &[String], args: &BruteArgs) -> Result<()> {
    let catalog = load_catalog(workdir, args.catalog.as_deref())?;
    let store_path = resolve(workdir, &args.store);
    let mut repo = Repository::open(&store_path).with_context(|| format!("opening store {}", store_path.display()))?;
    if !repo.is_empty() && !args.append {
        bail!("store {} already holds {} records; pass --append to add to it", store_path.display(), repo.len());
    }
    let arities = args.arity.arities();
    let settings = BruteSettings {
        arities: arities.clone(),
        count: args.count,
        seed: args.seed,
        evaluator: args.evaluator,
        worker_url: (args.evaluator == EvaluatorArg::Worker).then(|| args.worker.worker_url.clone()),
        store: store_path.display().to_string(),
        catalog: args.catalog.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "built-in".into()),
        catalog_version: catalog.version.clone(),
        catalog_digest: digest_of(&catalog.to_toml()),
    };
    let mut manifest = Manifest::new("brute", argv, settings);
    let manifest_path = workdir.join("manifests/brute.json");

    let evaluator: Option<Box<dyn Evaluator>> = match args.evaluator {
        EvaluatorArg::Surrogate => Some(Box::new(SurrogateEvaluator::new(catalog.clone()))),
        EvaluatorArg::Worker => Some(Box::new(scheduler(&args.worker)?)),
        EvaluatorArg::None => None,
    };
    let out_dir = resolve(workdir, &args.out_dir);
    let mut file_index = String::from("file,arity,index,ops,record_id,accuracy\n");
    let started = Instant::now();
    let mut enumerate_time = Duration::ZERO;
    let mut per_arity = Vec::new();

    for &arity in &arities {
        let t = Instant::now();
        let pipelines = enumerate_pipelines(&catalog, arity, args.count as usize, args.seed)?;
        let codes = pipelines.iter().map(|p| render_pipeline(&catalog, p)).collect::<Result<Vec<_>, _>>()?;
        enumerate_time += t.elapsed();

        // Every rendered pipeline must pass the same checks LLM output gets.
        for (p, code) in pipelines.iter().zip(&codes) {
            let report = check_response(&format!("<tr>{code}</tr>"));
            if !report.is_valid() {
                bail!("rendered pipeline {} of arity {arity} failed validation: {:?}", p.index(), report.violations);
            }
        }

        let results: Vec<Option<EvalResult>> = match &evaluator {
            Some(ev) => {
                let jobs: Vec<EvalJob> = codes
                    .iter()
                    .enumerate()
                    .map(|(i, code)| EvalJob {
                        job_id: format!("bf-{arity}-{i}"),
                        code: code.clone(),
                        config: EvalConfig::default(),
                        submitted_at: now_millis(),
                    })
                    .collect();
                let results = ev.evaluate(&jobs)?;
                if let Some(r) = results.iter().find(|r| r.error_class() == Some(ErrorClass::WorkerUnreachable)) {
                    bail!("worker unreachable while evaluating arity {arity} ({}); nothing stored for this arity", r.job_id);
                }
                results.into_iter().map(Some).collect()
            }
            None => vec![None; codes.len()],
        };

        let batch: Vec<NewRecord> = codes
            .iter()
            .zip(&results)
            .map(|(code, result)| -> Result<NewRecord> {
                Ok(NewRecord {
                    digest: canonicalize(code)?.digest,
                    code: code.clone(),
                    source: Source::Brute { arity: arity as u8 },
                    validity: augloop_core::ValidityStatus::Valid,
                    violations: vec![],
                    accuracy: result.as_ref().and_then(|r| r.accuracy_value()),
                    eval_error: result.as_ref().and_then(|r| r.error_class()),
                    eval_config: EvalConfig::default(),
                    created_at: now_millis(),
                })
            })
            .collect::<Result<_>>()?;
        let outcomes = repo.insert_batch(batch, CurationMode::Unfiltered)?;

        let mut accuracies = Vec::new();
        for ((p, code), outcome) in pipelines.iter().zip(&codes).zip(&outcomes) {
            let id = match outcome {
                InsertOutcome::Stored(id) | InsertOutcome::Duplicate(id) => *id,
                InsertOutcome::Rejected => continue,
            };
            let acc = repo.get(id).and_then(|r| r.accuracy);
            accuracies.extend(acc);
            let name = candidate_file_name(arity, p.index());
            if !args.no_files {
                write_text(&out_dir.join(&name), code)?;
            }
            let acc_cell = acc.map(|a| format!("{a:.4}")).unwrap_or_default();
            writeln!(file_index, "{name},{arity},{},{},{id},{acc_cell}", p.index(), p.op_names().join("|"))?;
        }
        per_arity.push((arity, pipelines.len(), summarize(&accuracies)));
    }
    if !args.no_files {
        write_text(&out_dir.join("manifest.csv"), &file_index)?;
    }
    let elapsed = started.elapsed();

    println!("arity  n      mean    best    95% CI");
    for (arity, n, s) in &per_arity {
        match s {
            Some(s) => println!("{arity:<6} {n:<6} {:.4}  {:.4}  [{:.4}, {:.4}]", s.mean, s.max, s.ci95.0, s.ci95.1),
            None => println!("{arity:<6} {n:<6} -       -       -"),
        }
    }
    println!(
        "stored {} records in {} (enumerate+render {:.3}s, total {:.3}s)",
        repo.len(),
        store_path.display(),
        enumerate_time.as_secs_f64(),
        elapsed.as_secs_f64()
    );

    manifest.finish(
        "completed",
        json!({
            "records": repo.len(),
            "per_arity": per_arity.iter().map(|(a, n, s)| json!({"arity": a, "n": n, "summary": s})).collect::<Vec<_>>(),
            "files": if args.no_files { None } else { Some(out_dir.display().to_string()) },
            "enumerate_seconds": enumerate_time.as_secs_f64(),
            "total_seconds": elapsed.as_secs_f64(),
        }),
    );
    write_json(&manifest_path, &manifest)
}
