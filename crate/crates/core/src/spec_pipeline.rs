//! Staged retrieval and the speculative generation controller.
//!
//! Vector search is split into stages of equal latency. After every stage
//! but the last the controller sees the current top-k candidates and may
//! start a speculative prefill for them; the last stage confirms or
//! discards the latest speculation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_tree::DocumentId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("staged retrieval needs at least one stage")]
    NoStages,
    #[error("stage {stage} has {len} documents, expected {k}")]
    InconsistentK { stage: usize, len: usize, k: usize },
    #[error("stage interval must be finite and non-negative, got {0}")]
    BadInterval(f64),
    #[error("convergence stage {convergence} outside 1..={stages}")]
    BadConvergence { convergence: usize, stages: usize },
    #[error("stage index {index} out of range for {stages} stages")]
    StageOutOfRange { index: usize, stages: usize },
}

/// Candidate top-k sequences observed after each retrieval stage. The last
/// stage is the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedRetrieval {
    stages: Vec<Vec<DocumentId>>,
    stage_interval_ms: f64,
}

impl StagedRetrieval {
    pub fn new(
        stages: Vec<Vec<DocumentId>>,
        stage_interval_ms: f64,
    ) -> Result<Self, PipelineError> {
        let Some(first) = stages.first() else {
            return Err(PipelineError::NoStages);
        };
        let k = first.len();
        if let Some((stage, s)) = stages.iter().enumerate().find(|(_, s)| s.len() != k) {
            return Err(PipelineError::InconsistentK {
                stage,
                len: s.len(),
                k,
            });
        }
        if !(stage_interval_ms >= 0.0 && stage_interval_ms.is_finite()) {
            return Err(PipelineError::BadInterval(stage_interval_ms));
        }
        Ok(Self {
            stages,
            stage_interval_ms,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_interval_ms(&self) -> f64 {
        self.stage_interval_ms
    }

    /// Candidates after stage `index` (0-based).
    pub fn next_stage(&self, index: usize) -> Result<&[DocumentId], PipelineError> {
        self.stages
            .get(index)
            .map(Vec::as_slice)
            .ok_or(PipelineError::StageOutOfRange {
                index,
                stages: self.stages.len(),
            })
    }

    pub fn final_docs(&self) -> &[DocumentId] {
        self.stages.last().expect("non-empty")
    }

    pub fn stages(&self) -> &[Vec<DocumentId>] {
        &self.stages
    }

    /// Latency of the whole search.
    pub fn total_ms(&self) -> f64 {
        self.stages.len() as f64 * self.stage_interval_ms
    }
}

/// Synthesizes a staged retrieval whose stages from `convergence_stage`
/// (1-based) onward equal `ground_truth`. Each earlier stage independently
/// perturbs the ground truth at one random position with a document drawn
/// uniformly from `0..corpus_size`: a document already in the sequence is
/// swapped into place, any other replaces the entry. Drawing the entry's own
/// document leaves the stage unchanged, so an early stage matches the
/// ground truth with probability `1 / corpus_size`.
pub fn generate_stages<R: Rng + ?Sized>(
    ground_truth: &[DocumentId],
    num_stages: usize,
    convergence_stage: usize,
    stage_interval_ms: f64,
    corpus_size: u32,
    rng: &mut R,
) -> Result<StagedRetrieval, PipelineError> {
    if num_stages == 0 {
        return Err(PipelineError::NoStages);
    }
    if convergence_stage == 0 || convergence_stage > num_stages {
        return Err(PipelineError::BadConvergence {
            convergence: convergence_stage,
            stages: num_stages,
        });
    }
    let stages = (1..=num_stages)
        .map(|stage| {
            let mut docs = ground_truth.to_vec();
            if stage < convergence_stage && !docs.is_empty() && corpus_size > 0 {
                let pos = rng.random_range(0..docs.len());
                let drawn = DocumentId(rng.random_range(0..corpus_size));
                match docs.iter().position(|d| *d == drawn) {
                    Some(other) => docs.swap(pos, other),
                    None => docs[pos] = drawn,
                }
            }
            docs
        })
        .collect();
    StagedRetrieval::new(stages, stage_interval_ms)
}

/// Handle of one prefill generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenerationId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pending,
    /// The latest speculation matched the final documents and is reused.
    Confirmed,
    /// A speculation existed but did not match; a fresh generation runs.
    Wasted,
    /// No speculation was live at the end of retrieval.
    Unspeculated,
}

/// What the engine must do in response to a controller step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PipelineAction {
    /// Stop the generation: drop it if queued, otherwise after its current
    /// iteration.
    Terminate(GenerationId),
    Launch {
        id: GenerationId,
        docs: Vec<DocumentId>,
        speculative: bool,
    },
}

/// Per-stage record kept for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageEvent {
    Speculate(GenerationId),
    Terminate(GenerationId),
    /// Candidates unchanged; the live generation keeps running.
    Continue,
    /// Candidates changed but the pool was full.
    Deferred,
    Confirm(GenerationId),
    Regenerate(GenerationId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveGeneration {
    pub id: GenerationId,
    pub docs: Vec<DocumentId>,
}

/// Controller state for one request. At most one generation is active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeculationState {
    pub request_id: u64,
    /// Last candidate sequence observed (sent or deferred).
    pub current_docs: Vec<DocumentId>,
    active: Option<ActiveGeneration>,
    pub outcome: Outcome,
    pub speculations: u32,
    pub terminations: u32,
    history: Vec<(usize, StageEvent)>,
}

impl SpeculationState {
    pub fn new(request_id: u64) -> Self {
        Self {
            request_id,
            current_docs: Vec::new(),
            active: None,
            outcome: Outcome::Pending,
            speculations: 0,
            terminations: 0,
            history: Vec::new(),
        }
    }

    pub fn active(&self) -> Option<&ActiveGeneration> {
        self.active.as_ref()
    }

    /// `(stage index, event)` pairs in the order they happened.
    pub fn history(&self) -> &[(usize, StageEvent)] {
        &self.history
    }

    /// Handles the candidates produced by a non-final stage. `pool_size`
    /// counts queued and running prefills; a speculation is launched only
    /// while it is below `max_prefill_bs`. `next_id` supplies fresh ids.
    pub fn on_stage_complete(
        &mut self,
        stage: usize,
        new_docs: &[DocumentId],
        pool_size: usize,
        max_prefill_bs: usize,
        next_id: &mut u64,
    ) -> Vec<PipelineAction> {
        if new_docs == self.current_docs.as_slice() {
            self.history.push((stage, StageEvent::Continue));
            return Vec::new();
        }
        let mut actions = Vec::new();
        if let Some(old) = self.active.take() {
            self.terminations += 1;
            self.history.push((stage, StageEvent::Terminate(old.id)));
            actions.push(PipelineAction::Terminate(old.id));
        }
        self.current_docs = new_docs.to_vec();
        if pool_size < max_prefill_bs {
            let id = GenerationId(*next_id);
            *next_id += 1;
            self.speculations += 1;
            self.active = Some(ActiveGeneration {
                id,
                docs: new_docs.to_vec(),
            });
            self.history.push((stage, StageEvent::Speculate(id)));
            actions.push(PipelineAction::Launch {
                id,
                docs: new_docs.to_vec(),
                speculative: true,
            });
        } else {
            self.history.push((stage, StageEvent::Deferred));
        }
        actions
    }

    /// Handles the final stage. Returns the outcome and the generation that
    /// will produce the answer, plus any actions for the engine.
    pub fn finalize(
        &mut self,
        stage: usize,
        final_docs: &[DocumentId],
        next_id: &mut u64,
    ) -> (Outcome, GenerationId, Vec<PipelineAction>) {
        let mut actions = Vec::new();
        let outcome = match self.active.take() {
            Some(g) if g.docs == final_docs => {
                self.history.push((stage, StageEvent::Confirm(g.id)));
                self.active = Some(g);
                Outcome::Confirmed
            }
            Some(g) => {
                self.terminations += 1;
                self.history.push((stage, StageEvent::Terminate(g.id)));
                actions.push(PipelineAction::Terminate(g.id));
                Outcome::Wasted
            }
            None => Outcome::Unspeculated,
        };
        if outcome != Outcome::Confirmed {
            let id = GenerationId(*next_id);
            *next_id += 1;
            self.history.push((stage, StageEvent::Regenerate(id)));
            self.active = Some(ActiveGeneration {
                id,
                docs: final_docs.to_vec(),
            });
            actions.push(PipelineAction::Launch {
                id,
                docs: final_docs.to_vec(),
                speculative: false,
            });
        }
        self.current_docs = final_docs.to_vec();
        self.outcome = outcome;
        let id = self.active.as_ref().expect("set above").id;
        (outcome, id, actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn docs(ids: &[u32]) -> Vec<DocumentId> {
        ids.iter().map(|i| DocumentId(*i)).collect()
    }

    /// Drives a retrieval through the controller with a fixed pool size.
    fn drive(
        r: &StagedRetrieval,
        pool: usize,
        bs: usize,
    ) -> (SpeculationState, Vec<PipelineAction>) {
        let mut s = SpeculationState::new(0);
        let mut next = 0;
        let mut all = Vec::new();
        let last = r.num_stages() - 1;
        for i in 0..last {
            all.extend(s.on_stage_complete(i, r.next_stage(i).unwrap(), pool, bs, &mut next));
        }
        let (_, _, a) = s.finalize(last, r.final_docs(), &mut next);
        all.extend(a);
        (s, all)
    }

    #[test]
    fn next_stage_returns_candidates() {
        let r = StagedRetrieval::new(
            vec![docs(&[1, 3]), docs(&[1, 2]), docs(&[1, 2]), docs(&[1, 2])],
            10.0,
        )
        .unwrap();
        assert_eq!(r.next_stage(0).unwrap(), docs(&[1, 3]).as_slice());
        assert_eq!(r.next_stage(3).unwrap(), r.final_docs());
        assert!(r.next_stage(4).is_err());
        assert_eq!(r.total_ms(), 40.0);
    }

    #[test]
    fn rejects_malformed_retrievals() {
        assert_eq!(
            StagedRetrieval::new(vec![], 1.0),
            Err(PipelineError::NoStages)
        );
        assert!(matches!(
            StagedRetrieval::new(vec![docs(&[1]), docs(&[1, 2])], 1.0),
            Err(PipelineError::InconsistentK { stage: 1, .. })
        ));
        assert!(StagedRetrieval::new(vec![docs(&[1])], -1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_stages(&docs(&[1]), 4, 0, 1.0, 10, &mut rng).is_err());
        assert!(generate_stages(&docs(&[1]), 4, 5, 1.0, 10, &mut rng).is_err());
    }

    #[test]
    fn speculation_timeline_two_generations_one_termination() {
        let r = StagedRetrieval::new(
            vec![docs(&[1, 3]), docs(&[1, 2]), docs(&[1, 2]), docs(&[1, 2])],
            10.0,
        )
        .unwrap();
        let (s, actions) = drive(&r, 0, 4);
        let g0 = GenerationId(0);
        let g1 = GenerationId(1);
        assert_eq!(
            s.history(),
            &[
                (0, StageEvent::Speculate(g0)),
                (1, StageEvent::Terminate(g0)),
                (1, StageEvent::Speculate(g1)),
                (2, StageEvent::Continue),
                (3, StageEvent::Confirm(g1)),
            ]
        );
        assert_eq!(s.speculations, 2);
        assert_eq!(s.terminations, 1);
        assert_eq!(s.outcome, Outcome::Confirmed);
        assert_eq!(actions.len(), 3);
    }

    #[test]
    fn full_pool_defers() {
        let r =
            StagedRetrieval::new(vec![docs(&[1, 3]), docs(&[1, 2]), docs(&[1, 2])], 1.0).unwrap();
        let (s, actions) = drive(&r, 4, 4);
        assert_eq!(s.speculations, 0);
        assert_eq!(s.outcome, Outcome::Unspeculated);
        // Only the post-retrieval generation is launched.
        assert_eq!(
            actions,
            vec![PipelineAction::Launch {
                id: GenerationId(0),
                docs: docs(&[1, 2]),
                speculative: false
            }]
        );
    }

    #[test]
    fn unchanged_candidates_speculate_once() {
        let r = StagedRetrieval::new(vec![docs(&[5, 6]); 4], 1.0).unwrap();
        let (s, _) = drive(&r, 0, 1);
        assert_eq!(s.speculations, 1);
        assert_eq!(s.terminations, 0);
        assert_eq!(s.outcome, Outcome::Confirmed);
    }

    #[test]
    fn mismatching_final_regenerates() {
        let r =
            StagedRetrieval::new(vec![docs(&[1, 2]), docs(&[1, 2]), docs(&[2, 1])], 1.0).unwrap();
        let (s, actions) = drive(&r, 0, 4);
        assert_eq!(s.outcome, Outcome::Wasted);
        assert_eq!(s.terminations, 1);
        assert_eq!(
            actions.last(),
            Some(&PipelineAction::Launch {
                id: GenerationId(1),
                docs: docs(&[2, 1]),
                speculative: false
            })
        );
    }

    #[test]
    fn single_stage_never_speculates() {
        let r = StagedRetrieval::new(vec![docs(&[1, 2])], 1.0).unwrap();
        let (s, _) = drive(&r, 0, 4);
        assert_eq!(s.speculations, 0);
        assert_eq!(s.outcome, Outcome::Unspeculated);
    }

    #[test]
    fn convergence_at_first_stage_is_always_confirmed() {
        let gt = docs(&[3, 7]);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = generate_stages(&gt, 4, 1, 5.0, 100, &mut rng).unwrap();
            assert!(r.stages().iter().all(|s| *s == gt));
            assert_eq!(drive(&r, 0, 4).0.outcome, Outcome::Confirmed);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let gt = docs(&[3, 7, 9]);
        let a = generate_stages(&gt, 6, 4, 5.0, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_stages(&gt, 6, 4, 5.0, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn late_convergence_confirms_at_collision_rate() {
        // With convergence at the last stage only a draw equal to the
        // perturbed entry's own document keeps the last speculative stage
        // intact, which happens with probability 1 / corpus_size.
        let corpus = 8u32;
        let gt = docs(&[2, 5]);
        let trials = 40_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let confirmed = (0..trials)
            .filter(|_| {
                let r = generate_stages(&gt, 4, 4, 1.0, corpus, &mut rng).unwrap();
                drive(&r, 0, 4).0.outcome == Outcome::Confirmed
            })
            .count();
        let p = 1.0 / corpus as f64;
        let rate = confirmed as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * sigma, "rate {rate} vs {p}");
    }

    proptest! {
        #[test]
        fn controller_invariants(
            stages in prop::collection::vec(prop::collection::vec(0u32..4, 2), 1..8),
            pools in prop::collection::vec(0usize..6, 8),
            bs in 1usize..5,
        ) {
            let stages: Vec<Vec<DocumentId>> = stages.iter().map(|s| docs(s)).collect();
            let r = StagedRetrieval::new(stages, 1.0).unwrap();
            let mut s = SpeculationState::new(0);
            let mut next = 0;
            let mut live: Option<GenerationId> = None;
            let last = r.num_stages() - 1;
            for (i, &pool) in pools.iter().enumerate().take(last) {
                for a in s.on_stage_complete(i, r.next_stage(i).unwrap(), pool, bs, &mut next) {
                    match a {
                        PipelineAction::Terminate(g) => {
                            prop_assert_eq!(live.take(), Some(g));
                        }
                        PipelineAction::Launch { id, speculative, .. } => {
                            prop_assert!(speculative);
                            prop_assert!(pool < bs);
                            prop_assert!(live.is_none());
                            live = Some(id);
                        }
                    }
                }
                prop_assert_eq!(s.active().map(|g| g.id), live);
            }
            let (outcome, answer, actions) = s.finalize(last, r.final_docs(), &mut next);
            for a in actions {
                match a {
                    PipelineAction::Terminate(g) => prop_assert_eq!(live.take(), Some(g)),
                    PipelineAction::Launch { id, speculative, docs } => {
                        prop_assert!(!speculative);
                        prop_assert_eq!(docs.as_slice(), r.final_docs());
                        prop_assert!(live.is_none());
                        live = Some(id);
                    }
                }
            }
            // Exactly one generation answers the request and it used the final documents.
            prop_assert_eq!(live, Some(answer));
            prop_assert_eq!(s.active().unwrap().docs.as_slice(), r.final_docs());
            prop_assert_ne!(outcome, Outcome::Pending);
        }
    }
}
