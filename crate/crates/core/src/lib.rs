//! Core of an LLM-driven search over image augmentation pipelines.
//!
//! Everything here is synchronous and I/O-light so it builds for
//! `wasm32-unknown-unknown` as well as native targets. Network clients live
//! in `augloop-net`.

pub mod codec;
pub mod controller;
pub mod eval;
pub mod gateway;
pub mod mock_llm;
pub mod pairs;
pub mod repository;
pub mod stats;
pub mod transform_space;

pub use codec::{canonicalize, check_response, CanonicalForm, ValidityReport, ValidityStatus, Violation};
pub use eval::{ErrorClass, EvalConfig, EvalJob, EvalOutcome, EvalResult, Evaluator, SurrogateEvaluator};
pub use gateway::{render_prompt, CandidateGenerator, SamplingParams, TemplateId};
pub use repository::{CandidateRecord, CurationMode, NewRecord, PromptMode, Repository, Source};
pub use transform_space::{default_catalog, enumerate_pipelines, render_pipeline, Catalog, PipelineSpec};
