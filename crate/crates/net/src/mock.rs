//! In-process mock servers speaking the LLM and worker wire schemas.
//!
//! Each server runs on its own thread with its own runtime, so blocking
//! clients in the calling thread can talk to it.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use augloop_core::controller::FinetuneJobSpec;
use augloop_core::eval::{EvalResult, EvaluateRequest, EvaluateResponse, SurrogateEvaluator};
use augloop_core::mock_llm::RecombiningMock;
use augloop_core::pairs::parse_dataset;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::oneshot;

use crate::llm::{ChatChoice, ChatMessage, ChatRequest, ChatResponse};
use crate::NetError;

/// A running server. Dropping it shuts the server down.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    fn start(bind: SocketAddr, router: Router) -> Result<Self, NetError> {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = match crate::runtime() {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = addr_tx.send(Err(e));
                    return;
                }
            };
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::bind(bind).await {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = addr_tx.send(Err(NetError::Io(e)));
                        return;
                    }
                };
                let _ = addr_tx.send(listener.local_addr().map_err(NetError::Io));
                let serve = axum::serve(listener, router).with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                });
                if let Err(e) = serve.await {
                    log::error!("mock server stopped: {e}");
                }
            });
        });
        let addr = addr_rx.recv().map_err(|_| NetError::Malformed("server thread exited".into()))??;
        Ok(MockServer { addr, shutdown: Some(shutdown_tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops (it never does on its own).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockLlmMode {
    /// Recombines the reference transforms in the prompt.
    Recombine,
    /// Always answers with the given text.
    Echo(String),
    /// Like `Recombine`, but every second request gets HTTP 500.
    FailEveryOther,
    /// Like `Recombine`, but requests carrying `top_k` get HTTP 400.
    RejectTopK,
}

struct LlmState {
    mode: MockLlmMode,
    mock: RecombiningMock,
    requests: AtomicUsize,
    seen: Mutex<Vec<ChatRequest>>,
}

/// Handle to inspect what a mock LLM received.
#[derive(Clone)]
pub struct LlmLog(Arc<LlmState>);

impl LlmLog {
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.0.seen.lock().unwrap().clone()
    }
}

fn error_body(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "error": { "message": message } }))).into_response()
}

async fn chat(State(state): State<Arc<LlmState>>, Json(req): Json<ChatRequest>) -> Response {
    let n = state.requests.fetch_add(1, Ordering::SeqCst);
    state.seen.lock().unwrap().push(req.clone());
    let prompt = req.messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("");
    let content = match &state.mode {
        MockLlmMode::Echo(text) => text.clone(),
        MockLlmMode::FailEveryOther if n % 2 == 1 => {
            return error_body(StatusCode::INTERNAL_SERVER_ERROR, "scripted failure");
        }
        MockLlmMode::RejectTopK if req.top_k.is_some() => {
            return error_body(StatusCode::BAD_REQUEST, "unrecognized request argument: top_k");
        }
        _ => state.mock.respond(prompt, req.seed.unwrap_or(0)),
    };
    let body = ChatResponse { choices: vec![ChatChoice { index: 0, message: ChatMessage { role: "assistant".into(), content } }] };
    Json(body).into_response()
}

/// Starts a mock chat-completion server. Serves `/v1/chat/completions` and
/// `/chat/completions`.
pub fn start_mock_llm(bind: SocketAddr, mode: MockLlmMode) -> Result<(MockServer, LlmLog), NetError> {
    let state = Arc::new(LlmState {
        mode,
        mock: RecombiningMock::default(),
        requests: AtomicUsize::new(0),
        seen: Mutex::new(Vec::new()),
    });
    let router = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/chat/completions", post(chat))
        .with_state(state.clone());
    Ok((MockServer::start(bind, router)?, LlmLog(state)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockWorkerMode {
    Surrogate,
    /// Every job scores this accuracy.
    Fixed(f64),
    /// Every job comes back as a syntax error.
    Reject,
    /// Surrogate scores after a delay.
    Delay(Duration),
    /// Answers the first `n` jobs, then HTTP 503 for everything.
    CrashAfter(usize),
}

struct WorkerState {
    mode: MockWorkerMode,
    surrogate: SurrogateEvaluator,
    jobs: AtomicUsize,
    finetune_jobs: Mutex<Vec<FinetuneJobSpec>>,
}

#[derive(Clone)]
pub struct WorkerLog(Arc<WorkerState>);

impl WorkerLog {
    pub fn jobs_seen(&self) -> usize {
        self.0.jobs.load(Ordering::SeqCst)
    }

    pub fn finetune_jobs(&self) -> Vec<FinetuneJobSpec> {
        self.0.finetune_jobs.lock().unwrap().clone()
    }
}

async fn evaluate(State(state): State<Arc<WorkerState>>, Json(req): Json<EvaluateRequest>) -> Response {
    let n = state.jobs.fetch_add(1, Ordering::SeqCst);
    let result = match &state.mode {
        MockWorkerMode::Surrogate => state.surrogate.evaluate_one(&req.job_id, &req.code),
        MockWorkerMode::Fixed(acc) => EvalResult::accuracy(&req.job_id, *acc),
        MockWorkerMode::Reject => {
            EvalResult::error(&req.job_id, augloop_core::ErrorClass::SyntaxError, "candidate failed to load")
        }
        MockWorkerMode::Delay(d) => {
            tokio::time::sleep(*d).await;
            state.surrogate.evaluate_one(&req.job_id, &req.code)
        }
        MockWorkerMode::CrashAfter(limit) => {
            if n >= *limit {
                return (StatusCode::SERVICE_UNAVAILABLE, "worker gone").into_response();
            }
            state.surrogate.evaluate_one(&req.job_id, &req.code)
        }
    };
    Json(EvaluateResponse::from(result)).into_response()
}

/// Checks a job the way the real worker would before training: LoRA
/// hyperparameters consistent, dataset readable and non-empty.
async fn finetune(State(state): State<Arc<WorkerState>>, Json(spec): Json<FinetuneJobSpec>) -> Response {
    if let Err(e) = spec.hyperparameters.check() {
        return error_body(StatusCode::UNPROCESSABLE_ENTITY, &e);
    }
    let samples = match std::fs::read_to_string(&spec.dataset_path) {
        Ok(text) => match parse_dataset(&text) {
            Ok(s) => s,
            Err(e) => return error_body(StatusCode::UNPROCESSABLE_ENTITY, &format!("dataset does not parse: {e}")),
        },
        Err(e) => return error_body(StatusCode::UNPROCESSABLE_ENTITY, &format!("dataset unreadable: {e}")),
    };
    if samples.is_empty() {
        return error_body(StatusCode::UNPROCESSABLE_ENTITY, "dataset is empty");
    }
    let adapter_path = spec.output_adapter_path.clone();
    state.finetune_jobs.lock().unwrap().push(spec);
    Json(json!({ "adapter_path": adapter_path })).into_response()
}

/// Starts a mock worker serving `/evaluate` and `/finetune`.
pub fn start_mock_worker(bind: SocketAddr, mode: MockWorkerMode) -> Result<(MockServer, WorkerLog), NetError> {
    let state = Arc::new(WorkerState {
        mode,
        surrogate: SurrogateEvaluator::default(),
        jobs: AtomicUsize::new(0),
        finetune_jobs: Mutex::new(Vec::new()),
    });
    let router = Router::new()
        .route("/evaluate", post(evaluate))
        .route("/finetune", post(finetune))
        .with_state(state.clone());
    Ok((MockServer::start(bind, router)?, WorkerLog(state)))
}
