//! Cache-aware reordering of the pending prefill queue.
//!
//! Requests are picked by `cached_length / computation_length`, highest
//! first, so work that reuses more of the cache per unit of new compute runs
//! before work that would mostly churn it. A starvation window bounds how
//! many scheduling decisions a request can be passed over.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::knowledge_tree::{DocumentId, KnowledgeTree, ReplacementPolicy, TreeConfig, TreeError};

/// A prefill waiting for the GPU.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingRequest {
    /// Generation id (a request may have several speculative generations).
    pub id: u64,
    pub request_id: u64,
    pub docs: Vec<DocumentId>,
    pub doc_sizes: Vec<u64>,
    pub prompt_tokens: u64,
    /// Tokens currently matched in the cache.
    pub cached_length: u64,
    /// Tokens that need prefill compute: missed documents plus the prompt.
    pub computation_length: u64,
    /// Number of scheduling decisions made before this entry was enqueued.
    pub enqueue_seq: u64,
    pub deadline_seq: u64,
    /// Unique FIFO position.
    pub arrival_seq: u64,
}

impl PendingRequest {
    fn refresh(&mut self, tree: &KnowledgeTree) {
        let m = tree.lookup(&self.docs);
        let hit = m.hit_docs();
        self.cached_length = m.hit_tokens();
        self.computation_length = self.doc_sizes[hit..].iter().sum::<u64>() + self.prompt_tokens;
    }
}

/// `cached_length / computation_length`.
pub fn order_priority(p: &PendingRequest) -> f64 {
    p.cached_length as f64 / p.computation_length.max(1) as f64
}

/// Exact comparison of two order priorities without floating point.
fn cmp_priority(a: &PendingRequest, b: &PendingRequest) -> Ordering {
    let lhs = a.cached_length as u128 * b.computation_length.max(1) as u128;
    let rhs = b.cached_length as u128 * a.computation_length.max(1) as u128;
    lhs.cmp(&rhs)
}

/// How a pick was made.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PickReason {
    /// Highest order priority (or FIFO when reordering is off).
    Priority,
    /// The entry reached its window deadline.
    Deadline,
}

/// Index of the entry to run next. Overdue entries (deadline reached) win,
/// oldest first; otherwise the highest order priority, ties to the older
/// entry. With `reorder` false this is plain FIFO.
pub fn pick_next(
    queue: &[PendingRequest],
    now_seq: u64,
    reorder: bool,
) -> Option<(usize, PickReason)> {
    if queue.is_empty() {
        return None;
    }
    let oldest = |it: &mut dyn Iterator<Item = (usize, &PendingRequest)>| {
        it.min_by_key(|(_, p)| p.arrival_seq).map(|(i, _)| i)
    };
    if !reorder {
        return oldest(&mut queue.iter().enumerate()).map(|i| (i, PickReason::Priority));
    }
    if let Some(i) = oldest(
        &mut queue
            .iter()
            .enumerate()
            .filter(|(_, p)| p.deadline_seq <= now_seq),
    ) {
        return Some((i, PickReason::Deadline));
    }
    queue
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| cmp_priority(a, b).then(b.arrival_seq.cmp(&a.arrival_seq)))
        .map(|(i, _)| (i, PickReason::Priority))
}

/// Recomputes every entry's cached and computation lengths from the tree.
pub fn rescan(queue: &mut [PendingRequest], tree: &KnowledgeTree) {
    for p in queue {
        p.refresh(tree);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub reorder: bool,
    /// Maximum number of decisions an entry may be passed over.
    pub window: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            reorder: true,
            window: 32,
        }
    }
}

/// Record of one scheduling decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub picked: PendingRequest,
    pub reason: PickReason,
    /// Decisions that passed this entry over.
    pub waited: u64,
    /// Whether any entry was overdue at decision time.
    pub any_overdue: bool,
}

/// The pending queue plus its decision counter.
#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    config: SchedulerConfig,
    queue: Vec<PendingRequest>,
    decisions: u64,
    next_arrival: u64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> SchedulerConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    pub fn queue(&self) -> &[PendingRequest] {
        &self.queue
    }

    pub fn enqueue(
        &mut self,
        id: u64,
        request_id: u64,
        docs: Vec<DocumentId>,
        doc_sizes: Vec<u64>,
        prompt_tokens: u64,
    ) {
        debug_assert_eq!(docs.len(), doc_sizes.len());
        let computation_length = doc_sizes.iter().sum::<u64>() + prompt_tokens;
        self.queue.push(PendingRequest {
            id,
            request_id,
            docs,
            doc_sizes,
            prompt_tokens,
            cached_length: 0,
            computation_length,
            enqueue_seq: self.decisions,
            deadline_seq: self.decisions + self.config.window,
            arrival_seq: self.next_arrival,
        });
        self.next_arrival += 1;
    }

    /// Drops a queued entry (used when a queued speculation goes stale).
    pub fn remove(&mut self, id: u64) -> Option<PendingRequest> {
        let pos = self.queue.iter().position(|p| p.id == id)?;
        Some(self.queue.remove(pos))
    }

    pub fn rescan(&mut self, tree: &KnowledgeTree) {
        rescan(&mut self.queue, tree);
    }

    /// Refreshes cache state and picks the next entry.
    pub fn next(&mut self, tree: &KnowledgeTree) -> Option<Decision> {
        if self.config.reorder {
            self.rescan(tree);
        }
        let now = self.decisions;
        let any_overdue = self.queue.iter().any(|p| p.deadline_seq <= now);
        let (i, reason) = pick_next(&self.queue, now, self.config.reorder)?;
        let picked = self.queue.remove(i);
        self.decisions += 1;
        Some(Decision {
            waited: now - picked.enqueue_seq,
            picked,
            reason,
            any_overdue,
        })
    }
}

/// One request of a unit-cost replay: a cached context document followed by
/// `compute_tokens` of new work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitCostRequest {
    pub context: DocumentId,
    pub context_tokens: u64,
    pub compute_tokens: u64,
}

/// Replays requests in `order` against a GPU-only cache of `capacity`
/// tokens where both cached contexts and in-flight computation occupy
/// space, charging one unit of cost per computed token. Every request's
/// context starts cached. Returns the total cost.
pub fn unit_cost_replay(
    capacity: u64,
    requests: &[UnitCostRequest],
    order: &[usize],
) -> Result<u64, TreeError> {
    let mut tree = KnowledgeTree::new(TreeConfig::new(capacity, 0, ReplacementPolicy::Pgdsf));
    for r in requests {
        tree.insert_path(&[r.context], &[r.context_tokens])?;
    }
    // query documents live outside the corpus id range
    let query_doc = |i: usize| DocumentId(u32::MAX - 1 - i as u32);
    let mut cost = 0;
    for &i in order {
        let r = requests[i];
        let m = tree.lookup(&[r.context]);
        if m.hit_docs() == 0 {
            cost += r.context_tokens;
        }
        cost += r.compute_tokens;
        let path = tree.insert_path_pinned(
            &[r.context, query_doc(i)],
            &[r.context_tokens, r.compute_tokens],
        )?;
        tree.unpin(&path)?;
        tree.discard(path[1])?;
    }
    Ok(cost)
}

/// Order in which the scheduler would run `requests` against the cache
/// state produced by preloading every context (as in [`unit_cost_replay`]).
pub fn scheduled_order(
    capacity: u64,
    requests: &[UnitCostRequest],
) -> Result<Vec<usize>, TreeError> {
    let mut tree = KnowledgeTree::new(TreeConfig::new(capacity, 0, ReplacementPolicy::Pgdsf));
    for r in requests {
        tree.insert_path(&[r.context], &[r.context_tokens])?;
    }
    let mut sched = Scheduler::new(SchedulerConfig {
        reorder: true,
        window: u64::MAX / 2,
    });
    for (i, r) in requests.iter().enumerate() {
        sched.enqueue(
            i as u64,
            i as u64,
            vec![r.context],
            vec![r.context_tokens],
            r.compute_tokens,
        );
    }
    let mut order = Vec::new();
    while let Some(d) = sched.next(&tree) {
        order.push(d.picked.id as usize);
    }
    Ok(order)
}
