use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost_model::CostProfile;
use crate::knowledge_tree::{DocumentId, KnowledgeTree, NodeId, TreeError};
use crate::scheduler::{PendingRequest, PickReason, Scheduler};
use crate::spec_pipeline::{
    generate_stages, Outcome, PipelineAction, SpeculationState, StagedRetrieval,
};

use super::report::{mean, percentile, Aggregates, RequestRecord, SimReport};
use super::{SimConfig, SimError, Trace};

/// Violations kept verbatim in the report; the rest are only counted.
const MAX_RECORDED_VIOLATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    StageComplete(usize),
    PrefillIterationDone(usize),
    DecodeDone,
    Arrival,
}

impl EventKind {
    fn rank(self) -> u8 {
        match self {
            EventKind::StageComplete(_) => 0,
            EventKind::PrefillIterationDone(_) => 1,
            EventKind::DecodeDone => 2,
            EventKind::Arrival => 3,
        }
    }
}

/// Ordered by time, then kind, then request id, then insertion.
#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    request_id: u64,
    req: usize,
    seq: u64,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.request_id.cmp(&other.request_id))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GenState {
    Queued,
    Running,
    /// Prefill finished; waiting for the retrieval to confirm it.
    Prefilled,
    Committed,
    Terminated,
}

/// Cache state captured when a generation starts executing.
#[derive(Debug, Clone)]
struct Admission {
    matched: Vec<NodeId>,
    gpu_hit: u64,
    host_hit: u64,
    hit_docs: usize,
    alpha: u64,
    beta: u64,
    exec_start: f64,
    prefill_ms: f64,
}

#[derive(Debug)]
struct Generation {
    req: usize,
    docs: Vec<DocumentId>,
    /// Answers its request (non-speculative, or confirmed by the final stage).
    confirmed: bool,
    state: GenState,
    adm: Option<Admission>,
    prefill_end: f64,
}

#[derive(Debug)]
struct Running {
    gen: usize,
    iters: Vec<f64>,
    next: usize,
    terminate: bool,
}

#[derive(Debug)]
enum Gpu {
    Idle,
    Prefill(Running),
    Decode,
}

#[derive(Debug)]
struct RequestState {
    retrieval: Option<StagedRetrieval>,
    spec: SpeculationState,
    retrieval_end: Option<f64>,
    wasted_ms: f64,
    record: Option<RequestRecord>,
}

#[derive(Debug, Default)]
struct Counters {
    speculative_launches: u64,
    terminations: u64,
    confirmed: u64,
    wasted: u64,
    unspeculated: u64,
    wasted_ms: f64,
    max_pool: usize,
    deadline_picks: u64,
    insert_failures: u64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    profile: &'a CostProfile,
    sizes: &'a [u64],
    trace: &'a Trace,
    tree: KnowledgeTree,
    sched: Scheduler,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: f64,
    reqs: Vec<RequestState>,
    gens: Vec<Generation>,
    next_gen: u64,
    gpu: Gpu,
    decode_queue: VecDeque<(usize, f64)>,
    clocks: (f64, f64),
    violations: Vec<String>,
    violation_count: u64,
    counters: Counters,
}

/// Simulates `trace` against a corpus with the given document sizes.
/// Identical inputs produce identical reports.
pub fn run(
    config: &SimConfig,
    profile: &CostProfile,
    doc_sizes: &[u64],
    trace: &Trace,
) -> Result<SimReport, SimError> {
    let largest = doc_sizes
        .iter()
        .copied()
        .max()
        .ok_or_else(|| SimError::Config("corpus is empty".into()))?;
    if doc_sizes.contains(&0) {
        return Err(SimError::Config(
            "corpus contains a zero-length document".into(),
        ));
    }
    config.validate(largest)?;
    trace.validate(doc_sizes.len(), config.k)?;
    Engine::new(config, profile, doc_sizes, trace).run()
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a SimConfig,
        profile: &'a CostProfile,
        sizes: &'a [u64],
        trace: &'a Trace,
    ) -> Self {
        let reqs = trace
            .requests()
            .iter()
            .map(|r| RequestState {
                retrieval: None,
                spec: SpeculationState::new(r.id),
                retrieval_end: None,
                wasted_ms: 0.0,
                record: None,
            })
            .collect();
        Self {
            cfg,
            profile,
            sizes,
            trace,
            tree: KnowledgeTree::new(cfg.tree_config()),
            sched: Scheduler::new(cfg.scheduler_config()),
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            reqs,
            gens: Vec::new(),
            next_gen: 0,
            gpu: Gpu::Idle,
            decode_queue: VecDeque::new(),
            clocks: (0.0, 0.0),
            violations: Vec::new(),
            violation_count: 0,
            counters: Counters::default(),
        }
    }

    fn push(&mut self, time: f64, kind: EventKind, req: usize) {
        let request_id = self.trace.requests()[req].id;
        self.events.push(Reverse(Event {
            time,
            kind,
            request_id,
            req,
            seq: self.seq,
        }));
        self.seq += 1;
    }

    fn violation(&mut self, msg: String) {
        self.violation_count += 1;
        if self.violations.len() < MAX_RECORDED_VIOLATIONS {
            self.violations.push(format!("t={:.3}: {msg}", self.now));
        }
    }

    fn pool_size(&self) -> usize {
        self.sched.len() + usize::from(matches!(self.gpu, Gpu::Prefill(_)))
    }

    fn run(mut self) -> Result<SimReport, SimError> {
        for (i, r) in self.trace.requests().iter().enumerate() {
            self.push(r.arrival_ms, EventKind::Arrival, i);
        }
        while let Some(Reverse(ev)) = self.events.pop() {
            if ev.time < self.now {
                self.violation(format!("event at {} processed after {}", ev.time, self.now));
            }
            self.now = self.now.max(ev.time);
            match ev.kind {
                EventKind::Arrival => self.on_arrival(ev.req)?,
                EventKind::StageComplete(s) => self.on_stage(ev.req, s)?,
                EventKind::PrefillIterationDone(g) => self.on_iteration(g)?,
                EventKind::DecodeDone => self.gpu = Gpu::Idle,
            }
            self.dispatch()?;
        }
        self.finish()
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), SimError> {
        let r = &self.trace.requests()[i];
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(r.id);
        let retrieval = generate_stages(
            &r.docs,
            self.cfg.stage_count,
            self.cfg.convergence_stage,
            self.cfg.stage_interval_ms,
            self.sizes.len() as u32,
            &mut rng,
        )?;
        let stages = self.cfg.stage_count;
        let first = if self.cfg.dsp { 0 } else { stages - 1 };
        let arrival = r.arrival_ms;
        for s in first..stages {
            self.push(
                arrival + (s + 1) as f64 * self.cfg.stage_interval_ms,
                EventKind::StageComplete(s),
                i,
            );
        }
        self.reqs[i].retrieval = Some(retrieval);
        Ok(())
    }

    fn on_stage(&mut self, i: usize, stage: usize) -> Result<(), SimError> {
        let retrieval = self.reqs[i].retrieval.as_ref().expect("arrived");
        let docs = retrieval.next_stage(stage)?.to_vec();
        if stage + 1 < retrieval.num_stages() {
            let pool = self.pool_size();
            let actions = self.reqs[i].spec.on_stage_complete(
                stage,
                &docs,
                pool,
                self.cfg.max_prefill_bs,
                &mut self.next_gen,
            );
            return self.apply(i, actions);
        }
        self.reqs[i].retrieval_end = Some(self.now);
        let (outcome, answer, actions) =
            self.reqs[i].spec.finalize(stage, &docs, &mut self.next_gen);
        match outcome {
            Outcome::Confirmed => self.counters.confirmed += 1,
            Outcome::Wasted => self.counters.wasted += 1,
            Outcome::Unspeculated => self.counters.unspeculated += 1,
            Outcome::Pending => unreachable!("finalize decides"),
        }
        self.apply(i, actions)?;
        let g = answer.0 as usize;
        self.gens[g].confirmed = true;
        if self.gens[g].state == GenState::Prefilled {
            self.complete(g)?;
        }
        Ok(())
    }

    fn apply(&mut self, i: usize, actions: Vec<PipelineAction>) -> Result<(), SimError> {
        for action in actions {
            match action {
                PipelineAction::Terminate(id) => self.terminate(id.0 as usize)?,
                PipelineAction::Launch {
                    id,
                    docs,
                    speculative,
                } => {
                    debug_assert_eq!(id.0 as usize, self.gens.len());
                    let r = &self.trace.requests()[i];
                    let sizes = docs.iter().map(|d| self.sizes[d.0 as usize]).collect();
                    self.sched
                        .enqueue(id.0, r.id, docs.clone(), sizes, r.prompt_tokens);
                    self.gens.push(Generation {
                        req: i,
                        docs,
                        confirmed: !speculative,
                        state: GenState::Queued,
                        adm: None,
                        prefill_end: 0.0,
                    });
                    let pool = self.pool_size();
                    self.counters.max_pool = self.counters.max_pool.max(pool);
                    if speculative {
                        self.counters.speculative_launches += 1;
                        if pool > self.cfg.max_prefill_bs {
                            self.violation(format!(
                                "speculation raised the pool to {pool} > {}",
                                self.cfg.max_prefill_bs
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn terminate(&mut self, g: usize) -> Result<(), SimError> {
        self.counters.terminations += 1;
        match self.gens[g].state {
            GenState::Queued => {
                self.sched.remove(g as u64);
                self.gens[g].state = GenState::Terminated;
            }
            GenState::Running => match &mut self.gpu {
                Gpu::Prefill(run) if run.gen == g => run.terminate = true,
                _ => self.violation(format!("running generation {g} not on the GPU")),
            },
            GenState::Prefilled => {
                let adm = self.gens[g].adm.as_ref().expect("admitted");
                let spent = self.gens[g].prefill_end - adm.exec_start;
                self.release(g)?;
                self.charge_waste(g, spent);
            }
            s @ (GenState::Committed | GenState::Terminated) => {
                self.violation(format!("terminating generation {g} in state {s:?}"));
            }
        }
        Ok(())
    }

    fn release(&mut self, g: usize) -> Result<(), SimError> {
        let adm = self.gens[g].adm.as_ref().expect("admitted");
        self.tree.unpin(&adm.matched)?;
        self.gens[g].state = GenState::Terminated;
        Ok(())
    }

    fn charge_waste(&mut self, g: usize, ms: f64) {
        let req = self.gens[g].req;
        self.reqs[req].wasted_ms += ms;
        self.counters.wasted_ms += ms;
    }

    /// Starts the next job if the GPU is idle. Decodes go before prefills.
    fn dispatch(&mut self) -> Result<(), SimError> {
        if !matches!(self.gpu, Gpu::Idle) {
            return Ok(());
        }
        if let Some((req, ms)) = self.decode_queue.pop_front() {
            self.gpu = Gpu::Decode;
            self.push(self.now + ms, EventKind::DecodeDone, req);
            return Ok(());
        }
        let Some(decision) = self.sched.next(&self.tree) else {
            return Ok(());
        };
        if decision.reason == PickReason::Deadline {
            self.counters.deadline_picks += 1;
        }
        if self.cfg.reorder && decision.any_overdue && decision.reason != PickReason::Deadline {
            self.violation(format!(
                "generation {} picked by priority while an entry was past its window",
                decision.picked.id
            ));
        }
        self.admit(decision.picked)
    }

    /// Prefill schedule: chunk `c` costs `T(alpha, b_c) - T(alpha, b_{c-1})`
    /// so the chunks sum to `T(alpha, beta)`. Host-resident prefix tokens are
    /// loaded before the first chunk.
    fn iterations(&self, alpha: u64, beta: u64, host_tokens: u64) -> Vec<f64> {
        let a = alpha as f64;
        let mut out = Vec::new();
        let mut done = 0;
        let mut prev = 0.0;
        while done < beta {
            let next = (done + self.cfg.chunk_tokens).min(beta);
            let t = self.profile.interpolate(a, next as f64);
            out.push(if done == 0 { t } else { (t - prev).max(0.0) });
            prev = t;
            done = next;
        }
        out[0] += self.cfg.transfer.transfer_time(host_tokens);
        out
    }

    fn admit(&mut self, p: PendingRequest) -> Result<(), SimError> {
        let g = p.id as usize;
        let m = self.tree.lookup(&self.gens[g].docs);
        self.tree.pin(&m.matched_nodes)?;
        let hit_docs = m.hit_docs();
        let alpha = m.hit_tokens();
        let beta = p.doc_sizes[hit_docs..].iter().sum::<u64>() + p.prompt_tokens;
        let expected = p.doc_sizes.iter().sum::<u64>() + p.prompt_tokens;
        if alpha + beta != expected {
            self.violation(format!(
                "generation {g}: hit {alpha} + miss {beta} != {expected} input tokens"
            ));
        }
        let iters = self.iterations(alpha, beta, m.host_hit_tokens);
        let first = iters[0];
        let gen = &mut self.gens[g];
        gen.state = GenState::Running;
        gen.adm = Some(Admission {
            matched: m.matched_nodes,
            gpu_hit: m.gpu_hit_tokens,
            host_hit: m.host_hit_tokens,
            hit_docs,
            alpha,
            beta,
            exec_start: self.now,
            prefill_ms: iters.iter().sum(),
        });
        let req = gen.req;
        self.gpu = Gpu::Prefill(Running {
            gen: g,
            iters,
            next: 0,
            terminate: false,
        });
        self.push(self.now + first, EventKind::PrefillIterationDone(g), req);
        Ok(())
    }

    fn on_iteration(&mut self, g: usize) -> Result<(), SimError> {
        let Gpu::Prefill(run) = &mut self.gpu else {
            self.violation(format!(
                "iteration of generation {g} with no prefill running"
            ));
            return Ok(());
        };
        run.next += 1;
        if run.terminate {
            self.gpu = Gpu::Idle;
            let spent = self.now - self.gens[g].adm.as_ref().expect("admitted").exec_start;
            self.release(g)?;
            self.charge_waste(g, spent);
        } else if run.next < run.iters.len() {
            let dt = run.iters[run.next];
            let req = self.gens[g].req;
            self.push(self.now + dt, EventKind::PrefillIterationDone(g), req);
        } else {
            self.gpu = Gpu::Idle;
            self.gens[g].prefill_end = self.now;
            self.gens[g].state = GenState::Prefilled;
            if self.gens[g].confirmed {
                self.complete(g)?;
            }
        }
        Ok(())
    }

    /// The answering generation has both finished its prefill and been
    /// confirmed: the first token is out.
    fn complete(&mut self, g: usize) -> Result<(), SimError> {
        self.commit(g)?;
        let i = self.gens[g].req;
        let r = &self.trace.requests()[i];
        let state = &self.reqs[i];
        let retrieval_ms = state.retrieval.as_ref().expect("arrived").total_ms();
        let retrieval_end = state.retrieval_end.expect("retrieval finished");
        let adm = self.gens[g].adm.as_ref().expect("admitted");
        let overlap = if self.cfg.dsp {
            (retrieval_end - adm.exec_start).clamp(0.0, retrieval_ms)
        } else {
            0.0
        };
        let record = RequestRecord {
            id: r.id,
            arrival_ms: r.arrival_ms,
            ttft_ms: self.now - r.arrival_ms,
            gpu_hit_tokens: adm.gpu_hit,
            host_hit_tokens: adm.host_hit,
            miss_tokens: adm.beta,
            hit_docs: adm.hit_docs,
            retrieved_docs: r.docs.len(),
            retrieval_ms,
            overlap_ms: overlap,
            non_overlap_ms: retrieval_ms - overlap,
            wasted_spec_ms: 0.0,
            prefill_ms: adm.prefill_ms,
            outcome: state.spec.outcome,
        };
        let decode_ms = r.output_tokens as f64 * self.cfg.decode_ms_per_token;
        self.reqs[i].record = Some(record);
        if decode_ms > 0.0 {
            self.decode_queue.push_back((i, decode_ms));
        }
        Ok(())
    }

    /// Folds a confirmed generation into the knowledge tree: statistics of
    /// the reused prefix, promotion of its host part and insertion of the
    /// newly computed documents.
    fn commit(&mut self, g: usize) -> Result<(), SimError> {
        let adm = self.gens[g].adm.clone().expect("admitted");
        let docs = self.gens[g].docs.clone();
        for &id in &adm.matched {
            self.tree.promote(id)?;
        }
        for &id in &adm.matched {
            self.tree
                .update_node(id, true, adm.alpha, adm.beta, self.profile)?;
        }
        if adm.hit_docs < docs.len() {
            let sizes: Vec<u64> = docs.iter().map(|d| self.sizes[d.0 as usize]).collect();
            match self.tree.insert_path_pinned(&docs, &sizes) {
                Ok(path) => {
                    for &id in &path[adm.hit_docs..] {
                        self.tree
                            .update_node(id, false, adm.alpha, adm.beta, self.profile)?;
                    }
                    self.tree.unpin(&path)?;
                }
                Err(TreeError::InsufficientEvictableCapacity { .. }) => {
                    self.counters.insert_failures += 1
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.tree.unpin(&adm.matched)?;
        self.gens[g].state = GenState::Committed;
        self.check_tree();
        Ok(())
    }

    fn check_tree(&mut self) {
        if !self.cfg.check_invariants {
            return;
        }
        if let Err(e) = self.tree.check_invariants() {
            self.violation(e);
        }
        let clocks = (self.tree.gpu().clock, self.tree.host().clock);
        if clocks.0 < self.clocks.0 || clocks.1 < self.clocks.1 {
            self.violation(format!(
                "tier clock decreased from {:?} to {clocks:?}",
                self.clocks
            ));
        }
        self.clocks = clocks;
    }

    fn finish(mut self) -> Result<SimReport, SimError> {
        self.check_tree();
        if !self.sched.is_empty() || !matches!(self.gpu, Gpu::Idle) {
            self.violation("work left after the last event".into());
        }
        let leaked: Vec<NodeId> = self
            .tree
            .node_ids()
            .filter(|id| self.tree.node(*id).is_some_and(|n| n.is_pinned()))
            .collect();
        if !leaked.is_empty() {
            self.violation(format!("{} nodes still pinned at the end", leaked.len()));
        }
        let mut requests = Vec::with_capacity(self.reqs.len());
        for (i, state) in self.reqs.iter_mut().enumerate() {
            match state.record.take() {
                Some(mut rec) => {
                    rec.wasted_spec_ms = state.wasted_ms;
                    requests.push(rec);
                }
                None => {
                    let id = self.trace.requests()[i].id;
                    self.violation_count += 1;
                    if self.violations.len() < MAX_RECORDED_VIOLATIONS {
                        self.violations
                            .push(format!("request {id} never produced a token"));
                    }
                }
            }
        }
        requests.sort_by_key(|r| r.id);

        let mut ttfts: Vec<f64> = requests.iter().map(|r| r.ttft_ms).collect();
        ttfts.sort_by(f64::total_cmp);
        let hit_docs: usize = requests.iter().map(|r| r.hit_docs).sum();
        let retrieved: usize = requests.iter().map(|r| r.retrieved_docs).sum();
        let gpu_hit: u64 = requests.iter().map(|r| r.gpu_hit_tokens).sum();
        let host_hit: u64 = requests.iter().map(|r| r.host_hit_tokens).sum();
        let miss: u64 = requests.iter().map(|r| r.miss_tokens).sum();
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let c = &self.counters;
        let aggregates = Aggregates {
            requests: requests.len(),
            mean_ttft_ms: mean(ttfts.iter().copied()),
            median_ttft_ms: percentile(&ttfts, 0.5),
            p99_ttft_ms: percentile(&ttfts, 0.99),
            document_hit_rate: ratio(hit_docs as f64, retrieved as f64),
            token_hit_rate: ratio(
                (gpu_hit + host_hit) as f64,
                (gpu_hit + host_hit + miss) as f64,
            ),
            gpu_hit_tokens: gpu_hit,
            host_hit_tokens: host_hit,
            miss_tokens: miss,
            mean_retrieval_ms: mean(requests.iter().map(|r| r.retrieval_ms)),
            mean_overlap_ms: mean(requests.iter().map(|r| r.overlap_ms)),
            mean_non_overlap_ms: mean(requests.iter().map(|r| r.non_overlap_ms)),
            speculative_launches: c.speculative_launches,
            terminations: c.terminations,
            confirmed: c.confirmed,
            wasted: c.wasted,
            unspeculated: c.unspeculated,
            wasted_spec_ms: c.wasted_ms,
            max_pool_size: c.max_pool,
            deadline_picks: c.deadline_picks,
            insert_failures: c.insert_failures,
            makespan_ms: self.now,
            tree: *self.tree.stats(),
            throughput_at_slo_rps: None,
            invariant_violations: self.violation_count,
        };
        Ok(SimReport {
            config: self.cfg.clone(),
            aggregates,
            violations: self.violations,
            requests,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_tree::ReplacementPolicy;
    use crate::simulator::Request;

    fn req(id: u64, t: f64, docs: &[u32]) -> Request {
        Request {
            id,
            arrival_ms: t,
            prompt_tokens: 32,
            docs: docs.iter().map(|d| DocumentId(*d)).collect(),
            output_tokens: 1,
        }
    }

    fn base(k: usize) -> SimConfig {
        SimConfig {
            k,
            dsp: false,
            reorder: false,
            gpu_capacity: 10_000,
            host_capacity: 10_000,
            ..SimConfig::default()
        }
    }

    /// `T = beta` ms regardless of alpha, exact in binary for multiples of 128.
    fn linear_profile() -> CostProfile {
        CostProfile::new(
            vec![0.0, 4096.0],
            vec![0.0, 4096.0],
            vec![vec![0.0, 4096.0], vec![0.0, 4096.0]],
        )
        .unwrap()
    }

    #[test]
    fn second_identical_request_hits_gpu() {
        let profile = CostProfile::default_synthetic();
        let cfg = base(1);
        let sizes = vec![500, 700];
        let trace = Trace::new(vec![req(0, 0.0, &[1]), req(1, 10_000.0, &[1])]);
        let rep = run(&cfg, &profile, &sizes, &trace).unwrap();
        let retrieval = cfg.stage_count as f64 * cfg.stage_interval_ms;
        let (a, b) = (&rep.requests[0], &rep.requests[1]);
        assert_eq!(a.hit_docs, 0);
        assert_eq!(a.miss_tokens, 732);
        assert_eq!(b.gpu_hit_tokens, 700);
        assert_eq!(b.miss_tokens, 32);
        let full = profile.interpolate(0.0, 732.0);
        let cached = profile.interpolate(700.0, 32.0);
        assert!((a.ttft_ms - (retrieval + full)).abs() < 1e-9);
        assert!((b.ttft_ms - (retrieval + cached)).abs() < 1e-9);
        assert!((a.ttft_ms - b.ttft_ms - (full - cached)).abs() < 1e-9);
        assert_eq!(rep.aggregates.document_hit_rate, 0.5);
        assert_eq!(
            rep.aggregates.invariant_violations, 0,
            "{:?}",
            rep.violations
        );
    }

    #[test]
    fn starved_gpu_serves_host_hits_with_transfer() {
        let profile = CostProfile::default_synthetic();
        let cfg = SimConfig {
            gpu_capacity: 100,
            host_capacity: 5_000,
            ..base(1)
        };
        let sizes = vec![600];
        let trace = Trace::new((0..4).map(|i| req(i, i as f64 * 5_000.0, &[0])).collect());
        let rep = run(&cfg, &profile, &sizes, &trace).unwrap();
        let transfer = cfg.transfer.transfer_time(600);
        let retrieval = cfg.stage_count as f64 * cfg.stage_interval_ms;
        for r in &rep.requests[1..] {
            assert_eq!(r.host_hit_tokens, 600);
            assert_eq!(r.gpu_hit_tokens, 0);
            let expected = retrieval + transfer + profile.interpolate(600.0, 32.0);
            assert!((r.ttft_ms - expected).abs() < 1e-9);
        }
        assert_eq!(
            rep.aggregates.invariant_violations, 0,
            "{:?}",
            rep.violations
        );
    }

    #[test]
    fn speculation_saves_two_stage_intervals() {
        // Stage 1 candidates differ from the final ones; the stale
        // speculation stops at the end of its 128-token iteration, exactly
        // when stage 2 delivers the converged candidates.
        let profile = linear_profile();
        let sizes = vec![992; 100];
        let off = SimConfig {
            stage_count: 4,
            convergence_stage: 2,
            stage_interval_ms: 128.0,
            chunk_tokens: 128,
            ..base(1)
        };
        let on = SimConfig {
            dsp: true,
            ..off.clone()
        };
        let trace = Trace::new(vec![req(0, 0.0, &[7])]);
        let r_off = run(&off, &profile, &sizes, &trace).unwrap();
        let r_on = run(&on, &profile, &sizes, &trace).unwrap();
        assert_eq!(r_on.aggregates.speculative_launches, 2);
        assert_eq!(r_on.aggregates.terminations, 1);
        assert_eq!(r_on.aggregates.confirmed, 1);
        assert_eq!(r_off.requests[0].ttft_ms, 512.0 + 1024.0);
        assert_eq!(r_on.requests[0].ttft_ms, 256.0 + 1024.0);
        assert_eq!(r_on.requests[0].overlap_ms, 256.0);
        assert_eq!(r_on.requests[0].non_overlap_ms, 256.0);
        assert_eq!(r_on.requests[0].wasted_spec_ms, 128.0);
        assert_eq!(r_off.requests[0].overlap_ms, 0.0);
    }

    #[test]
    fn confirmed_speculation_finishing_early_waits_for_retrieval() {
        let profile = linear_profile();
        let sizes = vec![96; 10];
        let cfg = SimConfig {
            dsp: true,
            stage_count: 4,
            convergence_stage: 1,
            stage_interval_ms: 1000.0,
            ..base(1)
        };
        let trace = Trace::new(vec![req(0, 0.0, &[3])]);
        let rep = run(&cfg, &profile, &sizes, &trace).unwrap();
        let r = &rep.requests[0];
        assert_eq!(r.ttft_ms, 4000.0);
        assert_eq!(r.overlap_ms, 3000.0);
        assert_eq!(r.non_overlap_ms, 1000.0);
        assert_eq!(rep.aggregates.speculative_launches, 1);
    }

    #[test]
    fn full_pool_matches_no_speculation_timing() {
        let profile = CostProfile::default_synthetic();
        let sizes = vec![300; 50];
        let trace = Trace::new(
            (0..30)
                .map(|i| req(i, i as f64 * 3.0, &[(i % 7) as u32, 20 + (i % 5) as u32]))
                .collect(),
        );
        let off = SimConfig {
            max_prefill_bs: 1,
            ..base(2)
        };
        // With a pool bound of one and a saturated GPU no speculation can start
        // after the first few requests; the first request speculates freely.
        let on = SimConfig {
            dsp: true,
            ..off.clone()
        };
        let r_off = run(&off, &profile, &sizes, &trace).unwrap();
        let r_on = run(&on, &profile, &sizes, &trace).unwrap();
        assert!(r_on.aggregates.unspeculated > 0);
        assert_eq!(
            r_on.aggregates.invariant_violations, 0,
            "{:?}",
            r_on.violations
        );
        for (a, b) in r_on.requests.iter().zip(&r_off.requests) {
            if a.outcome == Outcome::Unspeculated && a.wasted_spec_ms == 0.0 {
                assert_eq!(a.overlap_ms, 0.0);
            }
            assert!(b.overlap_ms == 0.0);
        }
    }

    fn single_doc_hits(cfg: &SimConfig, sizes: &[u64], accesses: &[u32]) -> Vec<usize> {
        let trace = Trace::new(
            accesses
                .iter()
                .enumerate()
                .map(|(i, d)| req(i as u64, i as f64 * 5_000.0, &[*d]))
                .collect(),
        );
        let rep = run(cfg, &CostProfile::default_synthetic(), sizes, &trace).unwrap();
        assert_eq!(
            rep.aggregates.invariant_violations, 0,
            "{:?}",
            rep.violations
        );
        rep.requests.iter().map(|r| r.hit_docs).collect()
    }

    #[test]
    fn lru_keeps_most_recent() {
        // One-document cache: A, B evicts A; A evicts B; A then hits.
        let cfg = SimConfig {
            gpu_capacity: 0,
            host_capacity: 100,
            policy: ReplacementPolicy::Lru,
            ..base(1)
        };
        assert_eq!(
            single_doc_hits(&cfg, &[100, 100], &[0, 1, 0, 0]),
            vec![0, 0, 0, 1]
        );
    }

    #[test]
    fn lru_matches_bruteforce_replay() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for slots in 1..=4u64 {
            let cfg = SimConfig {
                gpu_capacity: 0,
                host_capacity: 100 * slots,
                policy: ReplacementPolicy::Lru,
                ..base(1)
            };
            let accesses: Vec<u32> = (0..200).map(|_| rng.random_range(0..6)).collect();
            let mut cache: Vec<u32> = Vec::new();
            let expected: Vec<usize> = accesses
                .iter()
                .map(|d| {
                    let hit = cache.iter().position(|c| c == d);
                    if let Some(p) = hit {
                        cache.remove(p);
                    } else if cache.len() as u64 == slots {
                        cache.remove(0);
                    }
                    cache.push(*d);
                    usize::from(hit.is_some())
                })
                .collect();
            assert_eq!(
                single_doc_hits(&cfg, &[100; 6], &accesses),
                expected,
                "slots {slots}"
            );
        }
    }

    #[test]
    fn pgdsf_keeps_expensive_document() {
        // X sits behind a 1000-token cached prefix, Y at the root; both have
        // one access and equal size. X's per-token prefill cost is higher
        // because of the longer attention context. GDSF sees a tie and drops
        // the lower document id (X); PGDSF drops the cheaper Y.
        let profile = CostProfile::default_synthetic();
        let evicted = |policy| {
            let mut t = KnowledgeTree::new(crate::knowledge_tree::TreeConfig::new(1400, 0, policy));
            let (p, x, y, z) = (DocumentId(0), DocumentId(1), DocumentId(2), DocumentId(3));
            let path = t.insert_path_pinned(&[p, x], &[1000, 200]).unwrap();
            t.update_node(path[0], false, 0, 1232, &profile).unwrap();
            t.update_node(path[1], false, 1000, 232, &profile).unwrap();
            t.unpin(&path[1..]).unwrap();
            let ys = t.insert_path(&[y], &[200]).unwrap();
            t.update_node(ys[0], false, 0, 232, &profile).unwrap();
            t.insert_path(&[z], &[200]).unwrap();
            let left: Vec<bool> = [vec![p, x], vec![y]]
                .iter()
                .map(|d| t.lookup(d).hit_docs() == d.len())
                .collect();
            (left[0], left[1])
        };
        assert_eq!(evicted(ReplacementPolicy::Pgdsf), (true, false));
        assert_eq!(evicted(ReplacementPolicy::Gdsf), (false, true));
    }

    #[test]
    fn reports_are_deterministic() {
        let profile = CostProfile::default_synthetic();
        let sizes: Vec<u64> = (0..40).map(|i| 100 + 37 * i).collect();
        let trace = Trace::new(
            (0..200)
                .map(|i| {
                    req(
                        i,
                        i as f64 * 90.0,
                        &[(i * 7 % 40) as u32, (i * 3 % 11) as u32 + 20],
                    )
                })
                .collect(),
        );
        let cfg = SimConfig {
            dsp: true,
            reorder: true,
            gpu_capacity: 3_000,
            host_capacity: 8_000,
            ..base(2)
        };
        let a = run(&cfg, &profile, &sizes, &trace)
            .unwrap()
            .to_json()
            .unwrap();
        let b = run(&cfg, &profile, &sizes, &trace)
            .unwrap()
            .to_json()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_and_trace_errors() {
        let profile = CostProfile::default_synthetic();
        let sizes = vec![500, 700];
        let ok = Trace::new(vec![req(0, 0.0, &[1])]);
        let small_host = SimConfig {
            host_capacity: 600,
            ..base(1)
        };
        assert!(matches!(
            run(&small_host, &profile, &sizes, &ok),
            Err(SimError::Config(_))
        ));
        let unknown = Trace::new(vec![req(0, 0.0, &[5])]);
        assert!(matches!(
            run(&base(1), &profile, &sizes, &unknown),
            Err(SimError::Trace(_))
        ));
        let unsorted = Trace::new(vec![req(0, 5.0, &[1]), req(1, 0.0, &[0])]);
        assert!(matches!(
            run(&base(1), &profile, &sizes, &unsorted),
            Err(SimError::Trace(_))
        ));
    }

    #[test]
    fn event_order_breaks_ties_by_kind_then_request() {
        let ev = |time, kind, request_id, seq| Event {
            time,
            kind,
            request_id,
            req: 0,
            seq,
        };
        let mut v = [
            ev(1.0, EventKind::Arrival, 0, 0),
            ev(1.0, EventKind::DecodeDone, 5, 1),
            ev(1.0, EventKind::PrefillIterationDone(0), 9, 2),
            ev(1.0, EventKind::StageComplete(0), 3, 3),
            ev(1.0, EventKind::StageComplete(1), 2, 4),
            ev(0.5, EventKind::Arrival, 7, 5),
        ];
        v.sort();
        let order: Vec<u64> = v.iter().map(|e| e.seq).collect();
        assert_eq!(order, vec![5, 4, 3, 2, 1, 0]);
    }
}
