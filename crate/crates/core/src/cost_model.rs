//! Prefill latency model.
//!
//! A [`CostProfile`] is a grid of measured (or synthesized) prefill times
//! `T(alpha, beta)` for `alpha` cached tokens and `beta` non-cached tokens.
//! Queries between knots are answered with bilinear interpolation; queries
//! outside the grid are clamped to its boundary. [`TransferModel`] covers the
//! host to GPU copy time for KV tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostModelError {
    #[error("malformed profile: {0}")]
    MalformedProfile(String),
    #[error("failed to read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse profile {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// Offline prefill latency grid. `times[i][j]` is the latency in milliseconds
/// for `alpha_grid[i]` cached and `beta_grid[j]` non-cached tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    alpha_grid: Vec<f64>,
    beta_grid: Vec<f64>,
    times: Vec<Vec<f64>>,
}

/// Coefficients of the synthetic surface `c0 + c1*beta + c2*beta*(alpha + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    /// Fixed per-prefill overhead (ms).
    pub base_ms: f64,
    /// Linear per-token cost (ms/token).
    pub per_token_ms: f64,
    /// Attention cost per (new token x context token) pair (ms).
    pub attention_ms: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        // Roughly a 7B model on a single mid-range GPU: ~1.2 s for a 4k-token
        // full prefill, ~90 ms when all but 32 tokens are cached.
        Self {
            base_ms: 80.0,
            per_token_ms: 0.2,
            attention_ms: 2e-5,
        }
    }
}

/// Default knots used for both axes of a synthetic profile.
pub const DEFAULT_GRID: [f64; 8] = [0.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0, 16384.0];

fn validate_axis(name: &str, grid: &[f64]) -> Result<(), CostModelError> {
    if grid.len() < 2 {
        return Err(CostModelError::MalformedProfile(format!(
            "{name} grid needs at least 2 points, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CostModelError::MalformedProfile(format!(
            "{name} grid contains a negative or non-finite value"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CostModelError::MalformedProfile(format!(
            "{name} grid is not strictly ascending"
        )));
    }
    Ok(())
}

/// Index `i` such that `grid[i] <= x <= grid[i + 1]`; `x` must already be clamped.
/// `lo + w (hi - lo)`, returning `hi` itself at `w = 1` so that the upper
/// knot of the last segment is reproduced exactly.
fn lerp(lo: f64, hi: f64, w: f64) -> f64 {
    if w == 1.0 {
        hi
    } else {
        lo + w * (hi - lo)
    }
}

fn segment(grid: &[f64], x: f64) -> usize {
    let upper = grid.partition_point(|g| *g <= x);
    upper.saturating_sub(1).min(grid.len() - 2)
}

impl CostProfile {
    pub fn new(
        alpha_grid: Vec<f64>,
        beta_grid: Vec<f64>,
        times: Vec<Vec<f64>>,
    ) -> Result<Self, CostModelError> {
        validate_axis("alpha", &alpha_grid)?;
        validate_axis("beta", &beta_grid)?;
        if times.len() != alpha_grid.len() || times.iter().any(|r| r.len() != beta_grid.len()) {
            return Err(CostModelError::MalformedProfile(format!(
                "times must be {}x{}",
                alpha_grid.len(),
                beta_grid.len()
            )));
        }
        for (i, row) in times.iter().enumerate() {
            if row.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return Err(CostModelError::MalformedProfile(format!(
                    "row alpha={} has a negative or non-finite time",
                    alpha_grid[i]
                )));
            }
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(CostModelError::MalformedProfile(format!(
                    "row alpha={} decreases in beta",
                    alpha_grid[i]
                )));
            }
        }
        Ok(Self {
            alpha_grid,
            beta_grid,
            times,
        })
    }

    /// Builds the quadratic-attention surface on the given knots.
    pub fn synthetic(
        params: SyntheticParams,
        alpha_grid: Vec<f64>,
        beta_grid: Vec<f64>,
    ) -> Result<Self, CostModelError> {
        if [params.base_ms, params.per_token_ms, params.attention_ms]
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(CostModelError::MalformedProfile(
                "synthetic coefficients must be non-negative".into(),
            ));
        }
        let times = alpha_grid
            .iter()
            .map(|&a| {
                beta_grid
                    .iter()
                    .map(|&b| synthetic_time(&params, a, b))
                    .collect()
            })
            .collect();
        Self::new(alpha_grid, beta_grid, times)
    }

    /// Synthetic surface with default coefficients on [`DEFAULT_GRID`].
    pub fn default_synthetic() -> Self {
        Self::synthetic(
            SyntheticParams::default(),
            DEFAULT_GRID.to_vec(),
            DEFAULT_GRID.to_vec(),
        )
        .expect("default coefficients are valid")
    }

    pub fn alpha_grid(&self) -> &[f64] {
        &self.alpha_grid
    }

    pub fn beta_grid(&self) -> &[f64] {
        &self.beta_grid
    }

    pub fn times(&self) -> &[Vec<f64>] {
        &self.times
    }

    /// Knot value `T(alpha_grid[i], beta_grid[j])`.
    pub fn knot(&self, i: usize, j: usize) -> f64 {
        self.times[i][j]
    }

    /// Estimated prefill latency (ms) for `alpha` cached and `beta`
    /// non-cached tokens.
    ///
    /// Interpolates along alpha at the two bracketing beta knots, then blends
    /// the two results along beta.
    pub fn interpolate(&self, alpha: f64, beta: f64) -> f64 {
        let a_grid = &self.alpha_grid;
        let b_grid = &self.beta_grid;
        let alpha = alpha.clamp(a_grid[0], a_grid[a_grid.len() - 1]);
        let beta = beta.clamp(b_grid[0], b_grid[b_grid.len() - 1]);

        let i = segment(a_grid, alpha);
        let j = segment(b_grid, beta);
        let (a_lo, a_hi) = (a_grid[i], a_grid[i + 1]);
        let (b_lo, b_hi) = (b_grid[j], b_grid[j + 1]);
        let t = &self.times;

        let wa = (alpha - a_lo) / (a_hi - a_lo);
        let t_low = lerp(t[i][j], t[i + 1][j], wa);
        let t_high = lerp(t[i][j + 1], t[i + 1][j + 1], wa);
        let wb = (beta - b_lo) / (b_hi - b_lo);
        lerp(t_low, t_high, wb)
    }

    /// Loads a `alpha,beta,time_ms` CSV. Every (alpha, beta) pair of the
    /// cartesian product must appear exactly once.
    pub fn from_csv_path(path: &Path) -> Result<Self, CostModelError> {
        let file = std::fs::File::open(path).map_err(|source| CostModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_reader(file).map_err(|e| match e {
            CostModelError::Csv { source, .. } => CostModelError::Csv {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, CostModelError> {
        #[derive(Deserialize)]
        struct Row {
            alpha: f64,
            beta: f64,
            time_ms: f64,
        }

        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|source| CostModelError::Csv {
                path: String::new(),
                source,
            })?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["alpha", "beta", "time_ms"] {
            return Err(CostModelError::MalformedProfile(format!(
                "expected header alpha,beta,time_ms, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<Row>() {
            rows.push(rec.map_err(|source| CostModelError::Csv {
                path: String::new(),
                source,
            })?);
        }

        let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
        let mut betas: Vec<f64> = rows.iter().map(|r| r.beta).collect();
        for axis in [&mut alphas, &mut betas] {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }
        let mut times = vec![vec![f64::NAN; betas.len()]; alphas.len()];
        for r in &rows {
            let i = alphas.partition_point(|a| *a < r.alpha);
            let j = betas.partition_point(|b| *b < r.beta);
            if !times[i][j].is_nan() {
                return Err(CostModelError::MalformedProfile(format!(
                    "duplicate knot ({}, {})",
                    r.alpha, r.beta
                )));
            }
            times[i][j] = r.time_ms;
        }
        if let Some((i, j)) = times
            .iter()
            .enumerate()
            .find_map(|(i, row)| row.iter().position(|t| t.is_nan()).map(|j| (i, j)))
        {
            return Err(CostModelError::MalformedProfile(format!(
                "grid incomplete: missing knot ({}, {})",
                alphas[i], betas[j]
            )));
        }
        Self::new(alphas, betas, times)
    }

    /// Writes the profile in the same CSV layout [`Self::from_csv_reader`] reads.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["alpha", "beta", "time_ms"])?;
        for (i, a) in self.alpha_grid.iter().enumerate() {
            for (j, b) in self.beta_grid.iter().enumerate() {
                w.write_record([a.to_string(), b.to_string(), self.times[i][j].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn synthetic_time(p: &SyntheticParams, alpha: f64, beta: f64) -> f64 {
    p.base_ms + p.per_token_ms * beta + p.attention_ms * beta * (alpha + beta)
}

/// Host <-> GPU KV copy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferModel {
    /// Link bandwidth in bytes per millisecond.
    pub bandwidth_bytes_per_ms: f64,
    pub kv_bytes_per_token: f64,
}

pub const MIB: f64 = 1024.0 * 1024.0;
pub const GIB: f64 = 1024.0 * MIB;

impl Default for TransferModel {
    /// PCIe 4.0 x16 class link (16 GiB/s) and a 0.125 MiB/token GQA model.
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_ms: 16.0 * GIB / 1000.0,
            kv_bytes_per_token: 0.125 * MIB,
        }
    }
}

impl TransferModel {
    pub fn new(
        bandwidth_bytes_per_ms: f64,
        kv_bytes_per_token: f64,
    ) -> Result<Self, CostModelError> {
        if !(bandwidth_bytes_per_ms > 0.0 && bandwidth_bytes_per_ms.is_finite())
            || !(kv_bytes_per_token > 0.0 && kv_bytes_per_token.is_finite())
        {
            return Err(CostModelError::MalformedProfile(
                "transfer bandwidth and kv bytes per token must be positive".into(),
            ));
        }
        Ok(Self {
            bandwidth_bytes_per_ms,
            kv_bytes_per_token,
        })
    }

    /// Milliseconds to move `tokens` tokens of KV state across the link.
    pub fn transfer_time(&self, tokens: u64) -> f64 {
        tokens as f64 * self.kv_bytes_per_token / self.bandwidth_bytes_per_ms
    }

    /// Number of whole tokens whose KV state fits in `gib` GiB.
    pub fn tokens_for_gib(&self, gib: f64) -> u64 {
        (gib * GIB / self.kv_bytes_per_token).floor() as u64
    }
}
