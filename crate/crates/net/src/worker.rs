//! Clients for the training worker: `POST /evaluate` and `POST /finetune`.

use std::time::Duration;

use augloop_core::controller::FinetuneJobSpec;
use augloop_core::eval::{check_jobs, ErrorClass, EvalError, EvalJob, EvalResult, EvaluateRequest, EvaluateResponse, Evaluator};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::runtime::Runtime;

use crate::{runtime, NetError};

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    /// Worker base URL, e.g. `http://localhost:9000`.
    pub base_url: String,
    /// Jobs in flight at once.
    pub max_in_flight: usize,
    pub job_timeout: Duration,
}

impl SchedulerConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        SchedulerConfig { base_url: base_url.into(), max_in_flight: 1, job_timeout: Duration::from_secs(900) }
    }
}

/// Sends evaluation jobs to a worker, at most `max_in_flight` at a time.
/// Every job gets exactly one result, in job order.
pub struct EvalScheduler {
    config: SchedulerConfig,
    http: reqwest::Client,
    rt: Runtime,
}

impl EvalScheduler {
    pub fn new(config: SchedulerConfig) -> Result<Self, NetError> {
        let http = reqwest::Client::builder().timeout(config.job_timeout).build()?;
        Ok(EvalScheduler { config, http, rt: runtime()? })
    }

    async fn run_job(&self, job: &EvalJob) -> EvalResult {
        let url = format!("{}/evaluate", self.config.base_url.trim_end_matches('/'));
        let unreachable = |detail: String| EvalResult::error(&job.job_id, ErrorClass::WorkerUnreachable, detail);
        let resp = match self.http.post(url).json(&EvaluateRequest::from(job)).send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return EvalResult::error(&job.job_id, ErrorClass::Timeout, "job exceeded timeout"),
            Err(e) => return unreachable(e.to_string()),
        };
        if resp.status() != reqwest::StatusCode::OK {
            return unreachable(format!("worker answered HTTP {}", resp.status().as_u16()));
        }
        let body = match resp.text().await {
            Ok(b) => b,
            Err(e) if e.is_timeout() => return EvalResult::error(&job.job_id, ErrorClass::Timeout, "job exceeded timeout"),
            Err(e) => return unreachable(e.to_string()),
        };
        let parsed: EvaluateResponse = match serde_json::from_str(&body) {
            Ok(p) => p,
            Err(e) => return unreachable(format!("malformed worker response: {e}")),
        };
        if parsed.job_id() != job.job_id {
            return unreachable(format!("response for job {} while waiting for {}", parsed.job_id(), job.job_id));
        }
        parsed.into_result().unwrap_or_else(unreachable)
    }
}

impl Evaluator for EvalScheduler {
    fn evaluate(&self, jobs: &[EvalJob]) -> Result<Vec<EvalResult>, EvalError> {
        check_jobs(jobs)?;
        Ok(self.rt.block_on(
            stream::iter(jobs).map(|j| self.run_job(j)).buffered(self.config.max_in_flight.max(1)).collect(),
        ))
    }
}

/// `POST /finetune` 200 response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResponse {
    pub adapter_path: String,
}

pub struct FinetuneClient {
    base_url: String,
    http: reqwest::Client,
    rt: Runtime,
}

impl FinetuneClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, NetError> {
        let http = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(FinetuneClient { base_url: base_url.into(), http, rt: runtime()? })
    }

    /// Submits a job and waits for the adapter path.
    pub fn submit(&self, spec: &FinetuneJobSpec) -> Result<FinetuneResponse, NetError> {
        let url = format!("{}/finetune", self.base_url.trim_end_matches('/'));
        self.rt.block_on(async {
            let resp = self.http.post(url).json(spec).send().await?;
            let status = resp.status();
            let body = resp.text().await?;
            if !status.is_success() {
                return Err(NetError::Status(status.as_u16(), body));
            }
            serde_json::from_str(&body).map_err(|e| NetError::Malformed(e.to_string()))
        })
    }
}
