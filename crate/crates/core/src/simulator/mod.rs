//! Discrete-event simulation of a single-GPU RAG serving system.
//!
//! A request arrives, runs a staged vector search (with speculative
//! prefills when enabled), is admitted by the scheduler, prefills the
//! non-cached part of its input in chunked iterations and then decodes.
//! The knowledge tree is updated when the answering prefill is confirmed.

mod config;
mod engine;
mod report;
mod throughput;
mod trace;

use thiserror::Error;

use crate::cost_model::CostModelError;
use crate::knowledge_tree::TreeError;
use crate::spec_pipeline::PipelineError;

pub use crate::knowledge_tree::baseline_policy as baseline_policies;
pub use config::SimConfig;
pub use engine::run;
pub use report::{Aggregates, RequestRecord, SimReport};
pub use throughput::{measure_throughput, ThroughputResult};
pub use trace::{Request, Trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error(transparent)]
    Profile(#[from] CostModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
