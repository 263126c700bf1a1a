use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::knowledge_tree::TreeStats;
use crate::spec_pipeline::Outcome;

use super::{SimConfig, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub ttft_ms: f64,
    pub gpu_hit_tokens: u64,
    pub host_hit_tokens: u64,
    /// Non-cached tokens prefilled for the answer, prompt included.
    pub miss_tokens: u64,
    pub hit_docs: usize,
    pub retrieved_docs: usize,
    pub retrieval_ms: f64,
    /// Retrieval time during which the answering generation was already
    /// executing.
    pub overlap_ms: f64,
    pub non_overlap_ms: f64,
    /// GPU time spent on this request's terminated generations.
    pub wasted_spec_ms: f64,
    /// Pure compute time of the answering prefill, transfers included.
    pub prefill_ms: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub requests: usize,
    pub mean_ttft_ms: f64,
    pub median_ttft_ms: f64,
    pub p99_ttft_ms: f64,
    /// Hit documents over retrieved documents.
    pub document_hit_rate: f64,
    pub token_hit_rate: f64,
    pub gpu_hit_tokens: u64,
    pub host_hit_tokens: u64,
    pub miss_tokens: u64,
    pub mean_retrieval_ms: f64,
    pub mean_overlap_ms: f64,
    pub mean_non_overlap_ms: f64,
    pub speculative_launches: u64,
    pub terminations: u64,
    pub confirmed: u64,
    pub wasted: u64,
    pub unspeculated: u64,
    pub wasted_spec_ms: f64,
    pub max_pool_size: usize,
    pub deadline_picks: u64,
    pub insert_failures: u64,
    pub makespan_ms: f64,
    pub tree: TreeStats,
    /// Filled in by throughput measurement when requested.
    pub throughput_at_slo_rps: Option<f64>,
    pub invariant_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub aggregates: Aggregates,
    /// First violations found, if any.
    pub violations: Vec<String>,
    pub requests: Vec<RequestRecord>,
}

/// Nearest-rank percentile of sorted data.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub(crate) fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl SimReport {
    pub fn to_json(&self) -> Result<String, SimError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// `id,ttft_ms,gpu_hit_tokens,host_hit_tokens,miss_tokens,overlap_ms`.
    pub fn write_requests_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "id",
            "ttft_ms",
            "gpu_hit_tokens",
            "host_hit_tokens",
            "miss_tokens",
            "overlap_ms",
        ])
        .map_err(std::io::Error::from)?;
        for r in &self.requests {
            out.write_record([
                r.id.to_string(),
                r.ttft_ms.to_string(),
                r.gpu_hit_tokens.to_string(),
                r.host_hit_tokens.to_string(),
                r.miss_tokens.to_string(),
                r.overlap_ms.to_string(),
            ])
            .map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }
}
