use serde::{Deserialize, Serialize};

use crate::cost_model::TransferModel;
use crate::knowledge_tree::{ReplacementPolicy, TreeConfig};
use crate::scheduler::SchedulerConfig;

use super::SimError;

/// Everything that determines a run besides the cost profile, corpus and
/// trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub gpu_capacity: u64,
    pub host_capacity: u64,
    pub policy: ReplacementPolicy,
    pub frequency_decay: Option<f64>,
    /// Documents per request.
    pub k: usize,
    /// Prefill pool size below which a speculation may start.
    pub max_prefill_bs: usize,
    pub reorder: bool,
    pub window: u64,
    pub dsp: bool,
    pub stage_count: usize,
    pub stage_interval_ms: f64,
    /// First stage (1-based) whose candidates equal the final top-k.
    pub convergence_stage: usize,
    /// Non-cached tokens processed per prefill iteration.
    pub chunk_tokens: u64,
    pub decode_ms_per_token: f64,
    pub transfer: TransferModel,
    pub seed: u64,
    /// Check tree and engine invariants after every cache mutation.
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            gpu_capacity: 20_000,
            host_capacity: 200_000,
            policy: ReplacementPolicy::Pgdsf,
            frequency_decay: None,
            k: 2,
            max_prefill_bs: 4,
            reorder: true,
            window: 32,
            dsp: true,
            stage_count: 4,
            stage_interval_ms: 100.0,
            convergence_stage: 2,
            chunk_tokens: 256,
            decode_ms_per_token: 20.0,
            transfer: TransferModel::default(),
            seed: 0,
            check_invariants: true,
        }
    }
}

impl SimConfig {
    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            gpu_capacity: self.gpu_capacity,
            host_capacity: self.host_capacity,
            policy: self.policy,
            frequency_decay: self.frequency_decay,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            reorder: self.reorder,
            window: self.window,
        }
    }

    /// Checks internal consistency and that the host tier can hold the
    /// largest document.
    pub fn validate(&self, largest_doc: u64) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.host_capacity < largest_doc {
            return bad(format!(
                "host capacity {} is smaller than the largest document ({largest_doc} tokens)",
                self.host_capacity
            ));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.max_prefill_bs == 0 {
            return bad("max_prefill_bs must be >= 1".into());
        }
        if self.window == 0 {
            return bad("reorder window must be >= 1".into());
        }
        if self.stage_count == 0 {
            return bad("stage_count must be >= 1".into());
        }
        if self.convergence_stage == 0 || self.convergence_stage > self.stage_count {
            return bad(format!(
                "convergence_stage {} outside 1..={}",
                self.convergence_stage, self.stage_count
            ));
        }
        if self.chunk_tokens == 0 {
            return bad("chunk_tokens must be >= 1".into());
        }
        for (name, v) in [
            ("stage_interval_ms", self.stage_interval_ms),
            ("decode_ms_per_token", self.decode_ms_per_token),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(d) = self.frequency_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("frequency_decay must be in (0, 1], got {d}"));
            }
        }
        if !(self.transfer.bandwidth_bytes_per_ms > 0.0 && self.transfer.kv_bytes_per_token > 0.0) {
            return bad("transfer bandwidth and kv bytes per token must be positive".into());
        }
        Ok(())
    }
}
