//! Parallel parameter sweeps over policy, host capacity, seed, speculation
//! and retrieval width.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::Write;

use anyhow::Result;
use rayon::prelude::*;

use ragsim::cost_model::CostProfile;
use ragsim::knowledge_tree::ReplacementPolicy;
use ragsim::simulator::{run, Aggregates};

use crate::settings::{Settings, Workload, WorkloadSource};

#[derive(Debug, Clone)]
pub struct Grid {
    pub policies: Vec<ReplacementPolicy>,
    pub host_capacities: Vec<u64>,
    pub seeds: Vec<u64>,
    pub dsp: Vec<bool>,
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub seed: u64,
    pub host_capacity: u64,
    pub policy_rank: usize,
    pub dsp: bool,
    pub k: usize,
}

impl Cell {
    pub fn policy(&self) -> ReplacementPolicy {
        ReplacementPolicy::ALL[self.policy_rank]
    }
}

fn rank(p: ReplacementPolicy) -> usize {
    ReplacementPolicy::ALL
        .iter()
        .position(|q| *q == p)
        .expect("ALL lists every policy")
}

impl Grid {
    /// Every combination once, sorted by seed, capacity, policy, then the
    /// remaining axes.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &host_capacity in &self.host_capacities {
                for &p in &self.policies {
                    for &dsp in &self.dsp {
                        for &k in &self.k {
                            out.push(Cell {
                                seed,
                                host_capacity,
                                policy_rank: rank(p),
                                dsp,
                                k,
                            });
                        }
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

pub struct Row {
    pub cell: Cell,
    pub aggregates: Aggregates,
}

/// Runs every cell on rayon's pool. Preset workloads are generated once per
/// `(seed, k)`; file workloads are shared by all cells.
pub fn run_grid(base: &Settings, grid: &Grid, profile: &CostProfile) -> Result<Vec<Row>> {
    let cells = grid.cells();
    let mut workloads: BTreeMap<(u64, usize), Workload> = BTreeMap::new();
    let shared = match &base.workload {
        WorkloadSource::Files { .. } => Some(base.load_workload()?),
        WorkloadSource::Preset {
            preset,
            rate,
            duration_s,
        } => {
            for c in &cells {
                if let Entry::Vacant(slot) = workloads.entry((c.seed, c.k)) {
                    slot.insert(crate::settings::generate(
                        *preset,
                        *rate,
                        *duration_s,
                        c.k,
                        c.seed,
                    )?);
                }
            }
            None
        }
    };
    cells
        .par_iter()
        .map(|cell| {
            let w = shared
                .as_ref()
                .unwrap_or_else(|| &workloads[&(cell.seed, cell.k)]);
            let mut cfg = base.sim.clone();
            cfg.seed = cell.seed;
            cfg.host_capacity = cell.host_capacity;
            cfg.policy = cell.policy();
            cfg.dsp = cell.dsp;
            cfg.k = cell.k;
            let report = run(&cfg, profile, w.corpus.sizes(), &w.trace)?;
            Ok(Row {
                cell: *cell,
                aggregates: report.aggregates,
            })
        })
        .collect()
}

pub const HEADER: &str =
    "seed,host_capacity,policy,dsp,k,requests,document_hit_rate,token_hit_rate,\
mean_ttft_ms,p99_ttft_ms,mean_non_overlap_ms,speculative_launches,invariant_violations";

pub fn write_csv<W: Write>(rows: &[Row], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in rows {
        let (c, a) = (&r.cell, &r.aggregates);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.seed,
            c.host_capacity,
            c.policy().name(),
            if c.dsp { "on" } else { "off" },
            c.k,
            a.requests,
            a.document_hit_rate,
            a.token_hit_rate,
            a.mean_ttft_ms,
            a.p99_ttft_ms,
            a.mean_non_overlap_ms,
            a.speculative_launches,
            a.invariant_violations
        )?;
    }
    w.flush()
}
