//! Trace-driven simulator for knowledge caching in retrieval-augmented
//! generation serving.
//!
//! The [`knowledge_tree`] caches document KV states in a prefix tree over a
//! GPU and a host tier, [`cost_model`] estimates prefill latency,
//! [`scheduler`] reorders pending prefills, [`spec_pipeline`] overlaps
//! retrieval with speculative prefills, [`workload`] synthesizes corpora and
//! traces and [`simulator`] ties them together in a discrete-event engine.

pub mod cost_model;
pub mod knowledge_tree;
pub mod scheduler;
pub mod simulator;
pub mod spec_pipeline;
pub mod workload;
