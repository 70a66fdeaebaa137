//! HTTP side of augloop: a chat-completion client, the evaluation
//! scheduler and fine-tune client for the training worker, and mock servers
//! for both. Wire formats are described in `docs/wire.md`.

pub mod llm;
pub mod mock;
pub mod worker;

pub use llm::{ChatClient, ChatClientConfig};
pub use mock::{start_mock_llm, start_mock_worker, MockLlmMode, MockServer, MockWorkerMode};
pub use worker::{EvalScheduler, FinetuneClient, SchedulerConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("http client: {0}")]
    Http(#[from] reqwest::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("HTTP {0}: {1}")]
    Status(u16, String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Single-threaded runtime owned by each client; requests within a batch
/// still overlap because they are driven as concurrent futures.
pub(crate) fn runtime() -> Result<tokio::runtime::Runtime, NetError> {
    Ok(tokio::runtime::Builder::new_current_thread().enable_all().build()?)
}
