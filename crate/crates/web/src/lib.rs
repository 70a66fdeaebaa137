//! Browser demo: inspect brute-force pipelines, check a candidate the way
//! the loop does, and run a small mock loop. Every export returns JSON.

use augloop_core::controller::{run_loop, LoopConfig, LoopState, RecordingSink};
use augloop_core::mock_llm::RecombiningMock;
use augloop_core::stats::{loop_report, stats_csv};
use augloop_core::{
    canonicalize, check_response, default_catalog, enumerate_pipelines, render_pipeline, CurationMode, NewRecord,
    Repository, Source, SurrogateEvaluator, ValidityStatus,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn score_json(code: &str) -> Value {
    match SurrogateEvaluator::default().score(code) {
        Ok(acc) => json!({ "accuracy": acc }),
        Err((class, detail)) => json!({ "error": class.as_str(), "detail": detail }),
    }
}

/// Pipeline `index` of the given arity, rendered and scored.
pub fn pipeline(arity: usize, index: usize, seed: u64) -> Result<Value, String> {
    let catalog = default_catalog();
    let all = enumerate_pipelines(&catalog, arity, index + 1, seed).map_err(|e| e.to_string())?;
    let p = &all[index];
    let code = render_pipeline(&catalog, p).map_err(|e| e.to_string())?;
    Ok(json!({ "arity": arity, "index": index, "ops": p.op_names(), "score": score_json(&code), "code": code }))
}

/// Structural check, canonical digest and surrogate score of a raw reply.
pub fn inspect(raw: &str) -> Value {
    let report = check_response(raw);
    let code = report.extracted_code.clone();
    let canonical = code.as_deref().and_then(|c| canonicalize(c).ok());
    json!({
        "valid": report.is_valid(),
        "violations": report.violations.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
        "code": code,
        "digest": canonical.as_ref().map(|c| c.digest.clone()),
        "canonical": canonical.map(|c| c.canonical_text),
        "score": match (&report.extracted_code, report.is_valid()) {
            (Some(c), true) => score_json(c),
            _ => Value::Null,
        },
    })
}

/// Seeds a store with `per_arity` brute pipelines per arity, then runs the
/// loop against the in-process mock generator and surrogate scorer.
pub fn simulate(epochs: u32, per_epoch: usize, threshold: f64, per_arity: usize, seed: u64) -> Result<Value, String> {
    let catalog = default_catalog();
    let surrogate = SurrogateEvaluator::new(catalog.clone());
    let mut batch = Vec::new();
    for arity in 1..=3 {
        for p in enumerate_pipelines(&catalog, arity, per_arity, seed).map_err(|e| e.to_string())? {
            let code = render_pipeline(&catalog, &p).map_err(|e| e.to_string())?;
            let scored = surrogate.score(&code);
            batch.push(NewRecord {
                digest: canonicalize(&code).map_err(|e| e.to_string())?.digest,
                accuracy: scored.as_ref().ok().copied(),
                eval_error: scored.err().map(|e| e.0),
                code,
                source: Source::Brute { arity: arity as u8 },
                validity: ValidityStatus::Valid,
                violations: vec![],
                eval_config: Default::default(),
                created_at: 0,
            });
        }
    }
    let mut repo = Repository::in_memory();
    repo.insert_batch(batch, CurationMode::Unfiltered).map_err(|e| e.to_string())?;
    let mut state = LoopState::new(repo);
    let config = LoopConfig {
        n_epochs: epochs,
        candidates_per_epoch: per_epoch,
        filter_threshold: threshold,
        reference_seed: seed,
        pairing_seed: seed,
        generation_seed: seed,
        ..LoopConfig::default()
    };
    config.check()?;
    let mut sink = RecordingSink::default();
    let outcome = run_loop(&mut state, &config, 0, &RecombiningMock::default(), &surrogate, &mut sink, &mut |_| {});
    if let Some((epoch, err)) = outcome.halted {
        return Err(format!("epoch {epoch}: {err}"));
    }
    let report = loop_report(&outcome.stats);
    Ok(json!({
        "csv": stats_csv(&outcome.stats),
        "epochs": outcome.stats,
        "pool": state.pool.len(),
        "dataset_sizes": sink.jobs.iter().map(|(spec, _)| spec.n_samples).collect::<Vec<_>>(),
        "report": report,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pipeline)]
pub fn pipeline_js(arity: u32, index: u32, seed: u32) -> Result<String, JsError> {
    to_js(pipeline(arity as usize, index as usize, seed as u64))
}

#[wasm_bindgen(js_name = inspect)]
pub fn inspect_js(raw: &str) -> String {
    inspect(raw).to_string()
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(epochs: u32, per_epoch: u32, threshold: f64, per_arity: u32, seed: u32) -> Result<String, JsError> {
    to_js(simulate(epochs, per_epoch as usize, threshold, per_arity as usize, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_is_valid_and_scored() {
        let v = pipeline(2, 5, 7).unwrap();
        assert_eq!(v["ops"].as_array().unwrap().len(), 2);
        let code = v["code"].as_str().unwrap();
        assert_eq!(inspect(&format!("<tr>{code}</tr>"))["valid"], true);
        assert!(v["score"]["accuracy"].as_f64().is_some());
        assert!(pipeline(4, 0, 0).is_err());
    }

    #[test]
    fn inspect_reports_violations() {
        let v = inspect("```python\nprint(1)\n```");
        assert_eq!(v["valid"], false);
        assert!(!v["violations"].as_array().unwrap().is_empty());
        assert!(v["score"].is_null());
    }

    #[test]
    fn simulate_small_loop() {
        let v = simulate(4, 5, 0.55, 30, 1).unwrap();
        assert_eq!(v["epochs"].as_array().unwrap().len(), 4);
        assert_eq!(v["csv"].as_str().unwrap().lines().count(), 5);
        assert!(simulate(0, 5, 0.55, 30, 1).is_err());
    }
}
