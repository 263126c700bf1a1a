//! Knowledge tree: a prefix tree keyed by document-ID sequences.
//!
//! Each non-root node stands for the KV state of one document computed
//! behind the documents on its root path. Nodes live in one of two memory
//! tiers (GPU, host) and the tree keeps the hierarchical property that a GPU
//! node's parent is also on GPU and a host node's parent is on GPU or host.
//! Eviction only considers tier-local leaves, which preserves that property.
//!
//! A node's KV state is copied to host only the first time it leaves the
//! GPU. After that the host copy stays until the node is evicted from host,
//! and later GPU evictions are zero-copy drops.

mod policy;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::CostProfile;

pub use policy::{baseline_policy, ReplacementPolicy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("cannot reclaim {required} tokens from {tier}: only {available} evictable")]
    InsufficientEvictableCapacity {
        tier: Tier,
        required: u64,
        available: u64,
    },
    #[error("unpin of node {0:?} without a matching pin")]
    UnbalancedPin(NodeId),
    #[error("node {0:?} does not exist")]
    UnknownNode(NodeId),
    #[error("document sequence has {docs} entries but {sizes} sizes")]
    LengthMismatch { docs: usize, sizes: usize },
    #[error("document {0} has zero size")]
    ZeroSize(DocumentId),
    #[error("a cost sample needs at least one non-cached token")]
    NoNonCachedTokens,
    #[error("node {0:?} is pinned or has children and cannot be discarded")]
    NotDiscardable(NodeId),
    #[error("unknown replacement policy `{0}`")]
    UnknownPolicy(String),
}

/// Corpus document identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocumentId(pub u32);

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

/// Handle to a node in the tree arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Gpu,
    Host,
    Free,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Gpu => "gpu",
            Tier::Host => "host",
            Tier::Free => "free",
        })
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeNode {
    pub doc: DocumentId,
    /// Tokens after tokenization.
    pub size: u64,
    pub frequency: f64,
    /// Sum of per-non-cached-token prefill samples (ms/token).
    pub total_cost: f64,
    pub num_computed: u64,
    pub avg_cost: f64,
    pub priority: f64,
    /// Tier clock value used when `priority` was last computed.
    pub clock_base: f64,
    pub tier: Tier,
    pub has_host_copy: bool,
    /// GPU to host copies made while the current host copy has existed.
    pub swap_outs: u32,
    pub last_access: u64,
    pins: u32,
    children: BTreeMap<DocumentId, NodeId>,
    parent: Option<NodeId>,
}

impl KnowledgeNode {
    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn children(&self) -> impl Iterator<Item = (DocumentId, NodeId)> + '_ {
        self.children.iter().map(|(d, n)| (*d, *n))
    }

    pub fn child(&self, doc: DocumentId) -> Option<NodeId> {
        self.children.get(&doc).copied()
    }

    pub fn is_pinned(&self) -> bool {
        self.pins > 0
    }

    pub fn pin_count(&self) -> u32 {
        self.pins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierState {
    pub capacity: u64,
    pub used: u64,
    pub clock: f64,
}

impl TierState {
    fn new(capacity: u64) -> Self {
        Self {
            capacity,
            used: 0,
            clock: 0.0,
        }
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }
}

/// Result of walking the tree along a document sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrefixMatch {
    /// Matched nodes along the root path, root excluded.
    pub matched_nodes: Vec<NodeId>,
    pub gpu_hit_tokens: u64,
    pub host_hit_tokens: u64,
    pub miss_docs: Vec<DocumentId>,
}

impl PrefixMatch {
    pub fn hit_tokens(&self) -> u64 {
        self.gpu_hit_tokens + self.host_hit_tokens
    }

    pub fn hit_docs(&self) -> usize {
        self.matched_nodes.len()
    }
}

/// How a node left its tier during an eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvictionOutcome {
    /// GPU to host with a KV copy (first GPU eviction).
    SwappedOut,
    /// GPU to host reusing the existing host copy.
    ZeroCopy,
    /// Left the cache entirely.
    Freed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvictedNode {
    pub id: NodeId,
    pub doc: DocumentId,
    pub size: u64,
    pub priority: f64,
    pub outcome: EvictionOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub gpu_evictions: u64,
    pub host_evictions: u64,
    /// GPU to host KV copies.
    pub swap_outs: u64,
    pub swap_out_tokens: u64,
    pub zero_copy_evictions: u64,
    /// GPU evictions that could not be placed on host and were freed.
    pub gpu_drops: u64,
    /// Host to GPU promotions.
    pub loads: u64,
    pub load_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub gpu_capacity: u64,
    pub host_capacity: u64,
    pub policy: ReplacementPolicy,
    /// Per-access exponential decay applied to frequencies; `None` counts
    /// every access since start.
    pub frequency_decay: Option<f64>,
}

impl TreeConfig {
    pub fn new(gpu_capacity: u64, host_capacity: u64, policy: ReplacementPolicy) -> Self {
        Self {
            gpu_capacity,
            host_capacity,
            policy,
            frequency_decay: None,
        }
    }
}

/// Ordering key of an eviction candidate: lowest priority first, then the
/// larger node, then the lower document id.
#[derive(Debug, Clone, Copy)]
struct EvictKey {
    priority: f64,
    recency: u64,
    size: u64,
    doc: DocumentId,
    id: NodeId,
}

impl PartialEq for EvictKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for EvictKey {}

impl PartialOrd for EvictKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EvictKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(self.recency.cmp(&other.recency))
            .then(other.size.cmp(&self.size))
            .then(self.doc.cmp(&other.doc))
            .then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeTree {
    nodes: Vec<Option<KnowledgeNode>>,
    vacant: Vec<usize>,
    root: NodeId,
    gpu: TierState,
    host: TierState,
    policy: ReplacementPolicy,
    decay: Option<f64>,
    tick: u64,
    stats: TreeStats,
}

impl KnowledgeTree {
    /// Creates a tree holding only the shared system-prompt root. The root
    /// is permanently GPU resident, pinned, and takes no capacity.
    pub fn new(config: TreeConfig) -> Self {
        let root = KnowledgeNode {
            doc: DocumentId(u32::MAX),
            size: 0,
            frequency: 0.0,
            total_cost: 0.0,
            num_computed: 0,
            avg_cost: 0.0,
            priority: f64::INFINITY,
            clock_base: 0.0,
            tier: Tier::Gpu,
            has_host_copy: false,
            swap_outs: 0,
            last_access: 0,
            pins: 1,
            children: BTreeMap::new(),
            parent: None,
        };
        Self {
            nodes: vec![Some(root)],
            vacant: Vec::new(),
            root: NodeId(0),
            gpu: TierState::new(config.gpu_capacity),
            host: TierState::new(config.host_capacity),
            policy: config.policy,
            decay: config.frequency_decay,
            tick: 0,
            stats: TreeStats::default(),
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn policy(&self) -> ReplacementPolicy {
        self.policy
    }

    pub fn gpu(&self) -> &TierState {
        &self.gpu
    }

    pub fn host(&self) -> &TierState {
        &self.host
    }

    pub fn stats(&self) -> &TreeStats {
        &self.stats
    }

    /// Number of nodes excluding the root.
    pub fn len(&self) -> usize {
        self.nodes.iter().flatten().count() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, id: NodeId) -> Option<&KnowledgeNode> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    fn get(&self, id: NodeId) -> Result<&KnowledgeNode, TreeError> {
        self.node(id).ok_or(TreeError::UnknownNode(id))
    }

    fn n(&self, id: NodeId) -> &KnowledgeNode {
        self.nodes[id.0].as_ref().expect("live node")
    }

    fn n_mut(&mut self, id: NodeId) -> &mut KnowledgeNode {
        self.nodes[id.0].as_mut().expect("live node")
    }

    /// Iterator over live non-root node ids.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| n.is_some() && *i != self.root.0)
            .map(|(i, _)| NodeId(i))
    }

    /// Depth of a node; the root is at depth 0.
    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = self.n(id).parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.n(p).parent;
        }
        d
    }

    /// Document path from the root to `id`.
    pub fn path_docs(&self, id: NodeId) -> Vec<DocumentId> {
        let mut docs = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == self.root {
                break;
            }
            docs.push(self.n(c).doc);
            cur = self.n(c).parent;
        }
        docs.reverse();
        docs
    }

    /// Walks from the root along `docs` and stops at the first absent child.
    pub fn lookup(&self, docs: &[DocumentId]) -> PrefixMatch {
        let mut m = PrefixMatch::default();
        let mut cur = self.root;
        let mut matched = 0;
        for doc in docs {
            let Some(child) = self.n(cur).child(*doc) else {
                break;
            };
            let node = self.n(child);
            match node.tier {
                Tier::Gpu => m.gpu_hit_tokens += node.size,
                Tier::Host => m.host_hit_tokens += node.size,
                Tier::Free => unreachable!("free nodes are never linked"),
            }
            m.matched_nodes.push(child);
            cur = child;
            matched += 1;
        }
        m.miss_docs = docs[matched..].to_vec();
        m
    }

    fn tier_clock(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Gpu => self.gpu.clock,
            Tier::Host => self.host.clock,
            Tier::Free => 0.0,
        }
    }

    /// Records one retrieval of `id` by a request with `alpha` cached and
    /// `beta` non-cached tokens. When the node was not cached for that
    /// request a prefill cost sample `T(alpha, beta) / beta` is folded into
    /// its running mean.
    pub fn update_node(
        &mut self,
        id: NodeId,
        is_cached: bool,
        alpha: u64,
        beta: u64,
        profile: &CostProfile,
    ) -> Result<(), TreeError> {
        self.get(id)?;
        if !is_cached && beta == 0 {
            return Err(TreeError::NoNonCachedTokens);
        }
        self.tick += 1;
        let tick = self.tick;
        let decay = self.decay;
        let policy = self.policy;
        let clock = self.tier_clock(self.n(id).tier);
        let node = self.n_mut(id);
        if let Some(d) = decay {
            let idle = tick.saturating_sub(node.last_access).saturating_sub(1);
            node.frequency *= d.powf(idle as f64);
        }
        node.frequency += 1.0;
        if !is_cached {
            let t = profile.interpolate(alpha as f64, beta as f64);
            node.total_cost += t / beta as f64;
            node.num_computed += 1;
            node.avg_cost = node.total_cost / node.num_computed as f64;
        }
        node.last_access = tick;
        node.clock_base = clock;
        node.priority = policy.score(clock, node.avg_cost, node.frequency, tick);
        Ok(())
    }

    fn key(&self, id: NodeId) -> EvictKey {
        let n = self.n(id);
        EvictKey {
            priority: n.priority,
            recency: self.policy.recency_tiebreak(n.last_access),
            size: n.size,
            doc: n.doc,
            id,
        }
    }

    fn has_child_in(&self, id: NodeId, tiers: &[Tier], excluded: &BTreeSet<NodeId>) -> bool {
        self.n(id)
            .children
            .values()
            .any(|c| !excluded.contains(c) && tiers.contains(&self.n(*c).tier))
    }

    /// Picks the eviction sequence for `tier` without mutating anything.
    fn select_victims(&self, tier: Tier, required: u64) -> Result<Vec<NodeId>, TreeError> {
        if required == 0 {
            return Ok(Vec::new());
        }
        // A host node's children can only be host nodes, and a GPU node's
        // resident children matter only if they are on GPU.
        let blocking: &[Tier] = match tier {
            Tier::Gpu => &[Tier::Gpu],
            _ => &[Tier::Gpu, Tier::Host],
        };
        let eligible = |id: NodeId, gone: &BTreeSet<NodeId>| {
            let n = self.n(id);
            id != self.root
                && n.tier == tier
                && n.pins == 0
                && !self.has_child_in(id, blocking, gone)
        };

        let none = BTreeSet::new();
        let mut candidates: BTreeSet<EvictKey> = self
            .node_ids()
            .filter(|id| eligible(*id, &none))
            .map(|id| self.key(id))
            .collect();
        let mut chosen = BTreeSet::new();
        let mut order = Vec::new();
        let mut freed = 0u64;
        while freed < required {
            let Some(victim) = candidates.pop_first() else {
                return Err(TreeError::InsufficientEvictableCapacity {
                    tier,
                    required,
                    available: freed,
                });
            };
            freed += victim.size;
            chosen.insert(victim.id);
            order.push(victim.id);
            if let Some(parent) = self.n(victim.id).parent {
                if eligible(parent, &chosen) {
                    candidates.insert(self.key(parent));
                }
            }
        }
        Ok(order)
    }

    /// Frees at least `required` GPU tokens by evicting GPU leaves in
    /// priority order. Evicted nodes move to host (copying only if they have
    /// no host copy yet) or, when host cannot take them, leave the cache.
    pub fn evict_gpu(&mut self, required: u64) -> Result<Vec<EvictedNode>, TreeError> {
        let victims = self.select_victims(Tier::Gpu, required)?;
        let mut out = Vec::with_capacity(victims.len());
        for id in victims {
            let (size, priority, doc, has_copy) = {
                let n = self.n(id);
                (n.size, n.priority, n.doc, n.has_host_copy)
            };
            self.gpu.clock = self.gpu.clock.max(priority);
            self.gpu.used -= size;
            self.stats.gpu_evictions += 1;
            let outcome = if has_copy {
                self.n_mut(id).tier = Tier::Host;
                self.stats.zero_copy_evictions += 1;
                EvictionOutcome::ZeroCopy
            } else if self.make_host_room(size) {
                let n = self.n_mut(id);
                n.tier = Tier::Host;
                n.has_host_copy = true;
                n.swap_outs += 1;
                self.host.used += size;
                self.stats.swap_outs += 1;
                self.stats.swap_out_tokens += size;
                EvictionOutcome::SwappedOut
            } else {
                // Host is full of pinned or GPU-backed copies. The node and
                // its (host-only, unpinned) subtree leave the cache.
                self.n_mut(id).tier = Tier::Host;
                self.remove_subtree(id);
                self.stats.gpu_drops += 1;
                EvictionOutcome::Freed
            };
            out.push(EvictedNode {
                id,
                doc,
                size,
                priority,
                outcome,
            });
        }
        Ok(out)
    }

    fn make_host_room(&mut self, size: u64) -> bool {
        if size > self.host.capacity {
            return false;
        }
        let free = self.host.free();
        if free >= size {
            return true;
        }
        self.evict_host(size - free).is_ok()
    }

    /// Frees at least `required` host tokens by evicting host-tier leaves in
    /// priority order. Evicted nodes leave the tree.
    pub fn evict_host(&mut self, required: u64) -> Result<Vec<EvictedNode>, TreeError> {
        let victims = self.select_victims(Tier::Host, required)?;
        let mut out = Vec::with_capacity(victims.len());
        for id in victims {
            let (size, priority, doc) = {
                let n = self.n(id);
                (n.size, n.priority, n.doc)
            };
            self.host.clock = self.host.clock.max(priority);
            self.stats.host_evictions += 1;
            self.remove_subtree(id);
            out.push(EvictedNode {
                id,
                doc,
                size,
                priority,
                outcome: EvictionOutcome::Freed,
            });
        }
        Ok(out)
    }

    /// Unlinks `id` and all descendants, releasing their capacity.
    fn remove_subtree(&mut self, id: NodeId) {
        let mut stack = vec![id];
        let mut doomed = Vec::new();
        while let Some(cur) = stack.pop() {
            doomed.push(cur);
            stack.extend(self.n(cur).children.values().copied());
        }
        if let Some(parent) = self.n(id).parent {
            let doc = self.n(id).doc;
            self.n_mut(parent).children.remove(&doc);
        }
        for cur in doomed {
            let node = self.nodes[cur.0].take().expect("live node");
            debug_assert_eq!(node.pins, 0, "removing a pinned node");
            if node.tier == Tier::Gpu {
                self.gpu.used -= node.size;
            }
            if node.has_host_copy {
                self.host.used -= node.size;
            }
            self.vacant.push(cur.0);
        }
    }

    fn alloc(&mut self, node: KnowledgeNode) -> NodeId {
        match self.vacant.pop() {
            Some(slot) => {
                self.nodes[slot] = Some(node);
                NodeId(slot)
            }
            None => {
                self.nodes.push(Some(node));
                NodeId(self.nodes.len() - 1)
            }
        }
    }

    /// Ensures `size` free GPU tokens, evicting if needed. Returns false
    /// (without mutation) when that is impossible.
    fn make_gpu_room(&mut self, size: u64) -> bool {
        if size > self.gpu.capacity {
            return false;
        }
        let free = self.gpu.free();
        if free >= size {
            return true;
        }
        match self.select_victims(Tier::Gpu, size - free) {
            Ok(_) => {
                self.evict_gpu(size - free).expect("selection succeeded");
                true
            }
            Err(_) => false,
        }
    }

    /// Creates a child of `parent` for `doc`, on GPU when the parent is on
    /// GPU and room can be made, otherwise on host. The new node is pinned
    /// once; the caller owns that pin.
    fn materialize(
        &mut self,
        parent: NodeId,
        doc: DocumentId,
        size: u64,
    ) -> Result<NodeId, TreeError> {
        let parent_tier = self.n(parent).tier;
        let tier = if parent_tier == Tier::Gpu && self.make_gpu_room(size) {
            Tier::Gpu
        } else if self.make_host_room(size) {
            Tier::Host
        } else {
            return Err(TreeError::InsufficientEvictableCapacity {
                tier: Tier::Host,
                required: size,
                available: self.host.free(),
            });
        };
        let node = KnowledgeNode {
            doc,
            size,
            frequency: 0.0,
            total_cost: 0.0,
            num_computed: 0,
            avg_cost: 0.0,
            priority: self.tier_clock(tier),
            clock_base: self.tier_clock(tier),
            tier,
            has_host_copy: tier == Tier::Host,
            swap_outs: 0,
            last_access: self.tick,
            pins: 1,
            children: BTreeMap::new(),
            parent: Some(parent),
        };
        match tier {
            Tier::Gpu => self.gpu.used += size,
            _ => self.host.used += size,
        }
        let id = self.alloc(node);
        self.n_mut(parent).children.insert(doc, id);
        Ok(id)
    }

    /// Extends the tree along `docs`, creating the missing suffix. Existing
    /// nodes are left untouched. Returns the node ids of the whole path.
    ///
    /// New nodes are placed on GPU when their parent is on GPU and enough
    /// GPU capacity can be reclaimed; otherwise on host. If neither tier can
    /// hold a node the insertion stops there and the error is returned; the
    /// nodes created before that point remain.
    pub fn insert_path(
        &mut self,
        docs: &[DocumentId],
        sizes: &[u64],
    ) -> Result<Vec<NodeId>, TreeError> {
        let path = self.insert_path_pinned(docs, sizes)?;
        self.unpin(&path)?;
        Ok(path)
    }

    /// Same as [`Self::insert_path`] but returns with every node on the path
    /// pinned once. On error nothing stays pinned.
    pub fn insert_path_pinned(
        &mut self,
        docs: &[DocumentId],
        sizes: &[u64],
    ) -> Result<Vec<NodeId>, TreeError> {
        if docs.len() != sizes.len() {
            return Err(TreeError::LengthMismatch {
                docs: docs.len(),
                sizes: sizes.len(),
            });
        }
        if let Some(i) = sizes.iter().position(|s| *s == 0) {
            return Err(TreeError::ZeroSize(docs[i]));
        }
        let mut path = Vec::with_capacity(docs.len());
        let mut cur = self.root;
        for (doc, size) in docs.iter().zip(sizes) {
            let next = match self.n(cur).child(*doc) {
                Some(existing) => {
                    self.n_mut(existing).pins += 1;
                    existing
                }
                None => match self.materialize(cur, *doc, *size) {
                    Ok(id) => id,
                    Err(e) => {
                        self.unpin(&path)?;
                        return Err(e);
                    }
                },
            };
            path.push(next);
            cur = next;
        }
        Ok(path)
    }

    /// Moves a host node back to GPU, keeping its host copy. Requires the
    /// parent to be on GPU. Returns false if GPU room cannot be made.
    pub fn promote(&mut self, id: NodeId) -> Result<bool, TreeError> {
        let node = self.get(id)?;
        if node.tier == Tier::Gpu {
            return Ok(true);
        }
        let parent = node.parent.expect("non-root");
        if self.n(parent).tier != Tier::Gpu {
            return Ok(false);
        }
        let size = node.size;
        // Keep the node itself out of host eviction while GPU room is made.
        self.n_mut(id).pins += 1;
        let ok = self.make_gpu_room(size);
        self.n_mut(id).pins -= 1;
        if !ok {
            return Ok(false);
        }
        self.n_mut(id).tier = Tier::Gpu;
        self.gpu.used += size;
        self.stats.loads += 1;
        self.stats.load_tokens += size;
        Ok(true)
    }

    pub fn pin(&mut self, ids: &[NodeId]) -> Result<(), TreeError> {
        for id in ids {
            self.get(*id)?;
        }
        for id in ids {
            self.n_mut(*id).pins += 1;
        }
        Ok(())
    }

    pub fn unpin(&mut self, ids: &[NodeId]) -> Result<(), TreeError> {
        let mut need: BTreeMap<NodeId, u32> = BTreeMap::new();
        for id in ids {
            *need.entry(*id).or_default() += 1;
        }
        for (id, count) in &need {
            if self.get(*id)?.pins < *count {
                return Err(TreeError::UnbalancedPin(*id));
            }
        }
        for (id, count) in need {
            self.n_mut(id).pins -= count;
        }
        Ok(())
    }

    /// Removes an unpinned leaf from the cache entirely.
    pub fn discard(&mut self, id: NodeId) -> Result<(), TreeError> {
        let n = self.get(id)?;
        if id == self.root || n.pins > 0 || !n.children.is_empty() {
            return Err(TreeError::NotDiscardable(id));
        }
        self.remove_subtree(id);
        Ok(())
    }

    /// Deterministic text dump, one node per line in depth-first order with
    /// children sorted by document id:
    /// `depth doc tier size frequency avg_cost priority`.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let n = self.n(id);
            if id == self.root {
                writeln!(out, "0 S gpu 0 0 0.000000 inf").unwrap();
            } else {
                writeln!(
                    out,
                    "{} {} {} {} {} {:.6} {:.6}",
                    depth, n.doc.0, n.tier, n.size, n.frequency, n.avg_cost, n.priority
                )
                .unwrap();
            }
            for child in n.children.values().rev() {
                stack.push((*child, depth + 1));
            }
        }
        out
    }

    /// Checks every structural invariant; returns the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut gpu_used = 0;
        let mut host_used = 0;
        for id in self.node_ids() {
            let n = self.n(id);
            let parent = self.n(n.parent.ok_or_else(|| format!("{id:?} has no parent"))?);
            if parent.child(n.doc) != Some(id) {
                return Err(format!("{id:?} not linked from its parent"));
            }
            match n.tier {
                Tier::Gpu => {
                    gpu_used += n.size;
                    if parent.tier != Tier::Gpu {
                        return Err(format!("gpu node {id:?} under {} parent", parent.tier));
                    }
                }
                Tier::Host => {
                    if !n.has_host_copy {
                        return Err(format!("host node {id:?} without host copy"));
                    }
                    if parent.tier == Tier::Free {
                        return Err(format!("host node {id:?} under free parent"));
                    }
                }
                Tier::Free => return Err(format!("free node {id:?} still linked")),
            }
            if n.has_host_copy {
                host_used += n.size;
                if n.swap_outs > 1 {
                    return Err(format!("node {id:?} swapped out {} times", n.swap_outs));
                }
            }
            if n.size == 0 {
                return Err(format!("node {id:?} has zero size"));
            }
            if n.num_computed > 0 && n.avg_cost != n.total_cost / n.num_computed as f64 {
                return Err(format!("node {id:?} avg_cost out of sync"));
            }
            if self.policy.uses_clock() {
                let expected =
                    self.policy
                        .score(n.clock_base, n.avg_cost, n.frequency, n.last_access);
                if n.frequency > 0.0 && expected != n.priority {
                    return Err(format!(
                        "node {id:?} priority {} != recomputed {expected}",
                        n.priority
                    ));
                }
            }
        }
        if gpu_used != self.gpu.used || host_used != self.host.used {
            return Err(format!(
                "usage drift: gpu {} vs {}, host {} vs {}",
                gpu_used, self.gpu.used, host_used, self.host.used
            ));
        }
        if self.gpu.used > self.gpu.capacity || self.host.used > self.host.capacity {
            return Err("tier over capacity".into());
        }
        Ok(())
    }
}
