use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TreeError;

/// Node scoring rule used by the two-tier eviction loop. All policies share
/// the tree structure and the leaf-only candidate sets; they differ only in
/// how a node's priority is computed on access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementPolicy {
    /// Prefix-aware GDSF: `clock + avg_cost * frequency`, where `avg_cost` is the
    /// mean per-non-cached-token prefill time observed for the node.
    Pgdsf,
    /// GDSF with recomputation cost proportional to size, so `cost / size`
    /// is a constant and the score is `clock + frequency`.
    Gdsf,
    /// Last access order.
    Lru,
    /// Access count; ties fall back to last access.
    Lfu,
}

impl ReplacementPolicy {
    pub const ALL: [ReplacementPolicy; 4] = [Self::Pgdsf, Self::Gdsf, Self::Lru, Self::Lfu];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pgdsf => "pgdsf",
            Self::Gdsf => "gdsf",
            Self::Lru => "lru",
            Self::Lfu => "lfu",
        }
    }

    /// Whether the policy ages entries through the per-tier logical clock.
    pub fn uses_clock(self) -> bool {
        matches!(self, Self::Pgdsf | Self::Gdsf)
    }

    pub(crate) fn score(self, clock: f64, avg_cost: f64, frequency: f64, last_access: u64) -> f64 {
        match self {
            Self::Pgdsf => clock + avg_cost * frequency,
            Self::Gdsf => clock + frequency,
            Self::Lru => last_access as f64,
            Self::Lfu => frequency,
        }
    }

    /// Secondary ordering key among equal scores; only LFU uses recency.
    pub(crate) fn recency_tiebreak(self, last_access: u64) -> u64 {
        match self {
            Self::Lfu => last_access,
            _ => 0,
        }
    }
}

impl fmt::Display for ReplacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReplacementPolicy {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pgdsf" => Ok(Self::Pgdsf),
            "gdsf" => Ok(Self::Gdsf),
            "lru" => Ok(Self::Lru),
            "lfu" => Ok(Self::Lfu),
            _ => Err(TreeError::UnknownPolicy(s.to_string())),
        }
    }
}

/// Looks up a replacement policy by name.
pub fn baseline_policy(name: &str) -> Result<ReplacementPolicy, TreeError> {
    name.parse()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        for p in ReplacementPolicy::ALL {
            assert_eq!(baseline_policy(p.name()).unwrap(), p);
        }
        assert_eq!(baseline_policy("PGDSF").unwrap(), ReplacementPolicy::Pgdsf);
        assert!(matches!(
            baseline_policy("arc"),
            Err(TreeError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn gdsf_ignores_cost() {
        let p = ReplacementPolicy::Gdsf;
        assert_eq!(p.score(3.0, 100.0, 2.0, 9), 5.0);
        assert_eq!(ReplacementPolicy::Pgdsf.score(0.0, 2.0, 1.0, 0), 2.0);
    }
}
