use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::knowledge_tree::DocumentId;

use super::SimError;

/// One user request with its ground-truth top-k documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_ms: f64,
    pub prompt_tokens: u64,
    pub docs: Vec<DocumentId>,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    requests: Vec<Request>,
}

impl Trace {
    pub fn new(requests: Vec<Request>) -> Self {
        Self { requests }
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Same requests with every arrival time multiplied by `factor`.
    pub fn time_scaled(&self, factor: f64) -> Self {
        Self {
            requests: self
                .requests
                .iter()
                .map(|r| Request {
                    arrival_ms: r.arrival_ms * factor,
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Checks ordering, ids, lengths and document references.
    pub fn validate(&self, num_docs: usize, k: usize) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Trace(msg));
        let mut ids = BTreeSet::new();
        let mut last = 0.0;
        for (i, r) in self.requests.iter().enumerate() {
            if !(r.arrival_ms >= 0.0 && r.arrival_ms.is_finite()) {
                return bad(format!("request {} has arrival {}", r.id, r.arrival_ms));
            }
            if r.arrival_ms < last {
                return bad(format!("trace not sorted by arrival at line {}", i + 1));
            }
            last = r.arrival_ms;
            if !ids.insert(r.id) {
                return bad(format!("duplicate request id {}", r.id));
            }
            if r.prompt_tokens == 0 || r.output_tokens == 0 {
                return bad(format!(
                    "request {} needs prompt and output tokens >= 1",
                    r.id
                ));
            }
            if r.docs.len() != k {
                return bad(format!(
                    "request {} has {} documents, expected {k}",
                    r.id,
                    r.docs.len()
                ));
            }
            if let Some(d) = r.docs.iter().find(|d| d.0 as usize >= num_docs) {
                return bad(format!(
                    "request {} references unknown document {}",
                    r.id, d.0
                ));
            }
        }
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        for r in &self.requests {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self, SimError> {
        let mut requests = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let req = serde_json::from_str(&line)
                .map_err(|e| SimError::Trace(format!("line {}: {e}", i + 1)))?;
            requests.push(req);
        }
        Ok(Self { requests })
    }

    pub fn read_path(path: &Path) -> Result<Self, SimError> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}
