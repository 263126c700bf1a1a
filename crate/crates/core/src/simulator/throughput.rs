use serde::{Deserialize, Serialize};

use crate::cost_model::CostProfile;

use super::{run, SimConfig, SimError, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputResult {
    /// Highest probed rate meeting the SLO (requests per second).
    pub rate_rps: f64,
    /// Mean TTFT at the lowest rate; the SLO is a multiple of it.
    pub baseline_ttft_ms: f64,
    /// `(rate, mean TTFT)` for every simulated rate, in probe order.
    pub probes: Vec<(f64, f64)>,
}

/// Binary search for the highest arrival rate in `[min_rate, max_rate]`
/// whose mean TTFT stays within `slo_multiplier` times the mean TTFT at
/// `min_rate`. Rates are realized by compressing the arrival times of
/// `base_trace`, which was generated at `base_rate`.
#[allow(clippy::too_many_arguments)]
pub fn measure_throughput(
    config: &SimConfig,
    profile: &CostProfile,
    doc_sizes: &[u64],
    base_trace: &Trace,
    base_rate: f64,
    (min_rate, max_rate): (f64, f64),
    slo_multiplier: f64,
    steps: usize,
) -> Result<ThroughputResult, SimError> {
    if !(base_rate > 0.0 && min_rate > 0.0 && min_rate <= max_rate && max_rate.is_finite()) {
        return Err(SimError::Config(format!(
            "throughput search needs 0 < min_rate <= max_rate and base_rate > 0, got {min_rate}..{max_rate} from {base_rate}"
        )));
    }
    let mut probes = Vec::new();
    let mut mean_at = |rate: f64| -> Result<f64, SimError> {
        let trace = base_trace.time_scaled(base_rate / rate);
        let ttft = run(config, profile, doc_sizes, &trace)?
            .aggregates
            .mean_ttft_ms;
        probes.push((rate, ttft));
        Ok(ttft)
    };
    let baseline = mean_at(min_rate)?;
    let slo = slo_multiplier * baseline;
    if mean_at(max_rate)? <= slo {
        return Ok(ThroughputResult {
            rate_rps: max_rate,
            baseline_ttft_ms: baseline,
            probes,
        });
    }
    let (mut lo, mut hi) = (min_rate, max_rate);
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid)? <= slo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ThroughputResult {
        rate_rps: lo,
        baseline_ttft_ms: baseline,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_tree::DocumentId;
    use crate::simulator::Request;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    /// Every request reads two fresh documents, so service is deterministic.
    fn unique_doc_trace(n: usize, rate: f64) -> (Trace, Vec<u64>) {
        let gap = Exp::new(rate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = 0.0;
        let requests = (0..n)
            .map(|i| {
                t += gap.sample(&mut rng) * 1000.0;
                Request {
                    id: i as u64,
                    arrival_ms: t,
                    prompt_tokens: 32,
                    docs: vec![DocumentId(2 * i as u32), DocumentId(2 * i as u32 + 1)],
                    output_tokens: 1,
                }
            })
            .collect();
        (Trace::new(requests), vec![484; 2 * n])
    }

    fn analytic_config() -> SimConfig {
        SimConfig {
            dsp: false,
            reorder: false,
            stage_interval_ms: 0.0,
            decode_ms_per_token: 0.0,
            gpu_capacity: 1 << 40,
            host_capacity: 1 << 40,
            check_invariants: false,
            ..SimConfig::default()
        }
    }

    #[test]
    fn matches_deterministic_single_server_queue() {
        // With deterministic service s and Poisson arrivals the mean wait is
        // rho * s / (2 (1 - rho)); TTFT = wait + s. A 5x SLO on TTFT thus
        // allows a wait of 4 s, reached at rho = 8/9.
        let profile = CostProfile::default_synthetic();
        let cfg = analytic_config();
        let (trace, sizes) = unique_doc_trace(40_000, 1.0);
        let service_s = profile.interpolate(0.0, 1000.0) / 1000.0;
        let capacity = 1.0 / service_s;
        let res = measure_throughput(
            &cfg,
            &profile,
            &sizes,
            &trace,
            1.0,
            (0.05, 2.0 * capacity),
            5.0,
            14,
        )
        .unwrap();
        assert!((res.baseline_ttft_ms / 1000.0 - service_s).abs() / service_s < 0.02);
        assert!(
            res.rate_rps <= capacity,
            "{} above service rate {capacity}",
            res.rate_rps
        );
        let expected = 8.0 / 9.0 * capacity;
        assert!(
            (res.rate_rps - expected).abs() / expected < 0.05,
            "throughput {} vs analytic {expected}",
            res.rate_rps
        );
    }

    #[test]
    fn infinite_slo_returns_max_rate() {
        let profile = CostProfile::default_synthetic();
        let (trace, sizes) = unique_doc_trace(200, 1.0);
        let res = measure_throughput(
            &analytic_config(),
            &profile,
            &sizes,
            &trace,
            1.0,
            (0.1, 50.0),
            f64::INFINITY,
            5,
        )
        .unwrap();
        assert_eq!(res.rate_rps, 50.0);
        assert_eq!(res.probes.len(), 2);
    }
}
