//! Client for chat-completion style endpoints.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use augloop_core::gateway::{CandidateGenerator, GenerationRequest, SamplingParams, SlotError};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::runtime::Runtime;

use crate::{runtime, NetError};

#[derive(Debug, Clone, PartialEq)]
pub struct ChatClientConfig {
    /// Base URL up to and including the API version, e.g.
    /// `http://localhost:8000/v1`. Requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    /// Delay before the first retry; doubled for each further retry.
    pub initial_backoff: Duration,
    pub parallelism: usize,
}

impl ChatClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        ChatClientConfig {
            base_url: base_url.into(),
            api_key: None,
            model: "olympiccoder-7b".into(),
            timeout: Duration::from_secs(300),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body. `top_k` is not part of the common schema; servers that
/// reject it get the request again without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub index: u32,
    pub message: ChatMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

impl ChatRequest {
    pub fn new(model: &str, prompt: &str, params: &SamplingParams, seed: u64) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage { role: "user".into(), content: prompt.to_string() }],
            temperature: params.temperature,
            top_p: params.top_p,
            top_k: Some(params.top_k),
            max_tokens: params.max_new_tokens,
            seed: Some(seed),
        }
    }
}

pub struct ChatClient {
    config: ChatClientConfig,
    http: reqwest::Client,
    rt: Runtime,
    send_top_k: AtomicBool,
}

enum Failure {
    Retry(SlotError),
    Final(SlotError),
    RejectedTopK,
}

fn mentions_top_k(body: &str) -> bool {
    body.contains("top_k")
}

impl ChatClient {
    pub fn new(config: ChatClientConfig) -> Result<Self, NetError> {
        let http = reqwest::Client::builder().timeout(config.timeout).build()?;
        Ok(ChatClient { config, http, rt: runtime()?, send_top_k: AtomicBool::new(true) })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    /// Whether `top_k` is still being sent (false once the server rejected it).
    pub fn sends_top_k(&self) -> bool {
        self.send_top_k.load(Ordering::Relaxed)
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    async fn attempt(&self, body: &ChatRequest) -> Result<String, Failure> {
        let mut req = self.http.post(self.url()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err(Failure::Retry(SlotError::Timeout)),
            Err(e) => return Err(Failure::Retry(SlotError::Unreachable(e.to_string()))),
        };
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            if body.top_k.is_some() && (status == 400 || status == 422) && mentions_top_k(&text) {
                return Err(Failure::RejectedTopK);
            }
            let err = SlotError::Http(status.as_u16());
            return Err(if status.is_server_error() || status == 429 { Failure::Retry(err) } else { Failure::Final(err) });
        }
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Err(Failure::Retry(SlotError::Timeout)),
            Err(e) => return Err(Failure::Retry(SlotError::Unreachable(e.to_string()))),
        };
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| Failure::Final(SlotError::Malformed(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Failure::Final(SlotError::Malformed("no choices".into())))
    }

    async fn complete(&self, request: &GenerationRequest, params: &SamplingParams) -> Result<String, SlotError> {
        let mut body = ChatRequest::new(&self.config.model, &request.prompt, params, request.seed);
        let mut backoff = self.config.initial_backoff;
        let mut attempts = 0;
        loop {
            if !self.sends_top_k() {
                body.top_k = None;
            }
            attempts += 1;
            match self.attempt(&body).await {
                Ok(text) => return Ok(text),
                Err(Failure::RejectedTopK) => {
                    log::warn!("endpoint rejected top_k; sending requests without it");
                    self.send_top_k.store(false, Ordering::Relaxed);
                    attempts -= 1;
                }
                Err(Failure::Final(e)) => return Err(e),
                Err(Failure::Retry(e)) => {
                    if attempts >= self.config.max_attempts {
                        return Err(e);
                    }
                    log::debug!("retrying after {e} (attempt {attempts})");
                    tokio::time::sleep(backoff).await;
                    backoff *= 2;
                }
            }
        }
    }
}

impl CandidateGenerator for ChatClient {
    fn generate(&self, requests: &[GenerationRequest], params: &SamplingParams) -> Vec<Result<String, SlotError>> {
        self.rt.block_on(
            stream::iter(requests)
                .map(|r| self.complete(r, params))
                .buffered(self.config.parallelism.max(1))
                .collect(),
        )
    }
}
