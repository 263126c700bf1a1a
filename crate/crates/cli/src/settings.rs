//! Layered `key=value` settings: defaults, then a config file, then flags.
//!
//! Every key a run depends on has a materialized default, so the rendered
//! block of a resolved [`Settings`] reproduces the run when fed back as a
//! config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use ragsim::cost_model::{CostProfile, SyntheticParams, TransferModel, DEFAULT_GRID, GIB};
use ragsim::simulator::{SimConfig, Trace};
use ragsim::workload::{generate_corpus_seeded, generate_trace_seeded, Corpus, Preset, TraceSpec};

/// Recognized keys. Capacities may alternatively be given in GiB.
pub const KEYS: &[&str] = &[
    "gpu_capacity",
    "host_capacity",
    "gpu_gib",
    "host_gib",
    "kv_bytes_per_token",
    "bandwidth_gib_per_s",
    "policy",
    "frequency_decay",
    "k",
    "max_prefill_bs",
    "reorder",
    "window",
    "dsp",
    "stage_count",
    "stage_interval_ms",
    "convergence_stage",
    "chunk_tokens",
    "decode_ms_per_token",
    "seed",
    "check_invariants",
    "profile",
    "profile_base_ms",
    "profile_per_token_ms",
    "profile_attention_ms",
    "corpus",
    "trace",
    "preset",
    "rate",
    "duration_s",
    "throughput_slo",
    "throughput_min_rps",
    "throughput_max_rps",
    "throughput_steps",
];

/// Raw assignments in precedence order; a later assignment wins.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    values: BTreeMap<String, String>,
}

impl Layers {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !KEYS.contains(&key) {
            bail!("unknown setting `{key}`");
        }
        // a capacity given in one unit replaces the other unit
        let twin = match key {
            "gpu_gib" => Some("gpu_capacity"),
            "gpu_capacity" => Some("gpu_gib"),
            "host_gib" => Some("host_capacity"),
            "host_capacity" => Some("host_gib"),
            _ => None,
        };
        if let Some(t) = twin {
            self.values.remove(t);
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key=value, got `{line}`", n + 1))?;
            self.set(k, v)
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` flag.
    pub fn merge_assignment(&mut self, assignment: &str) -> Result<()> {
        self.merge_text(assignment, "--set")
    }
}

/// Where a run's requests come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Files {
        corpus: PathBuf,
        trace: PathBuf,
    },
    Preset {
        preset: Preset,
        rate: f64,
        duration_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSource {
    File(PathBuf),
    Synthetic(SyntheticParams),
}

/// Search for the highest rate whose mean TTFT stays within `slo` times
/// the mean TTFT at `min_rps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputSearch {
    pub slo: f64,
    pub min_rps: f64,
    pub max_rps: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub sim: SimConfig,
    pub profile: ProfileSource,
    pub workload: WorkloadSource,
    pub throughput: Option<ThroughputSearch>,
}

/// A loaded workload and the arrival rate it was generated at.
pub struct Workload {
    pub corpus: Corpus,
    pub trace: Trace,
    pub rate_rps: f64,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow!("invalid value `{v}` for {key}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => bail!("invalid value `{v}` for {key}: expected on/off"),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl Settings {
    pub fn resolve(layers: &Layers) -> Result<Self> {
        let get = |k: &str| layers.values.get(k).map(String::as_str);
        let mut sim = SimConfig::default();
        let mut synth = SyntheticParams::default();
        let mut bandwidth = sim.transfer.bandwidth_bytes_per_ms * 1000.0 / GIB;
        let mut kv = sim.transfer.kv_bytes_per_token;
        for (key, v) in &layers.values {
            let v = v.as_str();
            match key.as_str() {
                "gpu_capacity" => sim.gpu_capacity = parse(key, v)?,
                "host_capacity" => sim.host_capacity = parse(key, v)?,
                "kv_bytes_per_token" => kv = parse(key, v)?,
                "bandwidth_gib_per_s" => bandwidth = parse(key, v)?,
                "policy" => sim.policy = parse(key, v)?,
                "frequency_decay" => {
                    sim.frequency_decay = match v {
                        "none" | "off" => None,
                        _ => Some(parse(key, v)?),
                    }
                }
                "k" => sim.k = parse(key, v)?,
                "max_prefill_bs" => sim.max_prefill_bs = parse(key, v)?,
                "reorder" => sim.reorder = parse_bool(key, v)?,
                "window" => sim.window = parse(key, v)?,
                "dsp" => sim.dsp = parse_bool(key, v)?,
                "stage_count" => sim.stage_count = parse(key, v)?,
                "stage_interval_ms" => sim.stage_interval_ms = parse(key, v)?,
                "convergence_stage" => sim.convergence_stage = parse(key, v)?,
                "chunk_tokens" => sim.chunk_tokens = parse(key, v)?,
                "decode_ms_per_token" => sim.decode_ms_per_token = parse(key, v)?,
                "seed" => sim.seed = parse(key, v)?,
                "check_invariants" => sim.check_invariants = parse_bool(key, v)?,
                "profile_base_ms" => synth.base_ms = parse(key, v)?,
                "profile_per_token_ms" => synth.per_token_ms = parse(key, v)?,
                "profile_attention_ms" => synth.attention_ms = parse(key, v)?,
                // resolved below
                _ => {}
            }
        }
        sim.transfer = TransferModel::new(bandwidth * GIB / 1000.0, kv)
            .map_err(|e| anyhow!("transfer model: {e}"))?;
        if let Some(g) = get("gpu_gib") {
            sim.gpu_capacity = sim.transfer.tokens_for_gib(parse("gpu_gib", g)?);
        }
        if let Some(g) = get("host_gib") {
            sim.host_capacity = sim.transfer.tokens_for_gib(parse("host_gib", g)?);
        }
        if sim.gpu_capacity == 0 && sim.host_capacity == 0 {
            bail!("gpu_capacity and host_capacity cannot both be 0");
        }

        let profile = match get("profile") {
            Some(p) if !p.is_empty() && p != "synthetic" => ProfileSource::File(PathBuf::from(p)),
            _ => ProfileSource::Synthetic(synth),
        };
        let workload = match (get("corpus"), get("trace")) {
            (Some(c), Some(t)) => WorkloadSource::Files {
                corpus: PathBuf::from(c),
                trace: PathBuf::from(t),
            },
            (None, None) => WorkloadSource::Preset {
                preset: parse("preset", get("preset").unwrap_or("mmlu"))?,
                rate: parse("rate", get("rate").unwrap_or("0.8"))?,
                duration_s: parse("duration_s", get("duration_s").unwrap_or("3600"))?,
            },
            _ => bail!("corpus and trace must be given together"),
        };
        let throughput = match get("throughput_slo") {
            None | Some("none") | Some("off") => None,
            Some(v) => Some(ThroughputSearch {
                slo: parse("throughput_slo", v)?,
                min_rps: parse(
                    "throughput_min_rps",
                    get("throughput_min_rps").unwrap_or("0.1"),
                )?,
                max_rps: parse(
                    "throughput_max_rps",
                    get("throughput_max_rps").unwrap_or("10"),
                )?,
                steps: parse("throughput_steps", get("throughput_steps").unwrap_or("10"))?,
            }),
        };
        Ok(Self {
            sim,
            profile,
            workload,
            throughput,
        })
    }

    pub fn load_profile(&self) -> Result<CostProfile> {
        match &self.profile {
            ProfileSource::File(p) => CostProfile::from_csv_path(p)
                .with_context(|| format!("reading profile {}", p.display())),
            ProfileSource::Synthetic(params) => {
                CostProfile::synthetic(*params, DEFAULT_GRID.to_vec(), DEFAULT_GRID.to_vec())
                    .map_err(|e| anyhow!("synthetic profile: {e}"))
            }
        }
    }

    /// Reads the corpus and trace files, or generates both from the preset
    /// with the run's seed and `k`.
    pub fn load_workload(&self) -> Result<Workload> {
        match &self.workload {
            WorkloadSource::Files { corpus, trace } => {
                let c = Corpus::read_csv_path(corpus)
                    .with_context(|| format!("reading corpus {}", corpus.display()))?;
                let t = Trace::read_path(trace)
                    .with_context(|| format!("reading trace {}", trace.display()))?;
                // mean rate over the span of the trace
                let span_ms = t.requests().last().map_or(0.0, |r| r.arrival_ms);
                let rate_rps = if span_ms > 0.0 {
                    t.len() as f64 * 1000.0 / span_ms
                } else {
                    1.0
                };
                Ok(Workload {
                    corpus: c,
                    trace: t,
                    rate_rps,
                })
            }
            WorkloadSource::Preset {
                preset,
                rate,
                duration_s,
            } => generate(*preset, *rate, *duration_s, self.sim.k, self.sim.seed),
        }
    }

    /// Warnings about legal but suspicious settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sim.gpu_capacity > self.sim.host_capacity {
            out.push(format!(
                "gpu_capacity ({}) exceeds host_capacity ({}); host normally holds one to two orders of magnitude more",
                self.sim.gpu_capacity, self.sim.host_capacity
            ));
        }
        out
    }

    /// Every effective setting as `key=value` lines, sorted by key.
    pub fn render(&self) -> String {
        let s = &self.sim;
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("gpu_capacity", s.gpu_capacity.to_string());
        kv.insert("host_capacity", s.host_capacity.to_string());
        kv.insert(
            "kv_bytes_per_token",
            s.transfer.kv_bytes_per_token.to_string(),
        );
        kv.insert(
            "bandwidth_gib_per_s",
            (s.transfer.bandwidth_bytes_per_ms * 1000.0 / GIB).to_string(),
        );
        kv.insert("policy", s.policy.name().to_string());
        kv.insert(
            "frequency_decay",
            s.frequency_decay.map_or("none".into(), |d| d.to_string()),
        );
        kv.insert("k", s.k.to_string());
        kv.insert("max_prefill_bs", s.max_prefill_bs.to_string());
        kv.insert("reorder", on_off(s.reorder).into());
        kv.insert("window", s.window.to_string());
        kv.insert("dsp", on_off(s.dsp).into());
        kv.insert("stage_count", s.stage_count.to_string());
        kv.insert("stage_interval_ms", s.stage_interval_ms.to_string());
        kv.insert("convergence_stage", s.convergence_stage.to_string());
        kv.insert("chunk_tokens", s.chunk_tokens.to_string());
        kv.insert("decode_ms_per_token", s.decode_ms_per_token.to_string());
        kv.insert("seed", s.seed.to_string());
        kv.insert("check_invariants", on_off(s.check_invariants).into());
        match &self.profile {
            ProfileSource::File(p) => {
                kv.insert("profile", p.display().to_string());
            }
            ProfileSource::Synthetic(p) => {
                kv.insert("profile", "synthetic".into());
                kv.insert("profile_base_ms", p.base_ms.to_string());
                kv.insert("profile_per_token_ms", p.per_token_ms.to_string());
                kv.insert("profile_attention_ms", p.attention_ms.to_string());
            }
        }
        match &self.workload {
            WorkloadSource::Files { corpus, trace } => {
                kv.insert("corpus", corpus.display().to_string());
                kv.insert("trace", trace.display().to_string());
            }
            WorkloadSource::Preset {
                preset,
                rate,
                duration_s,
            } => {
                kv.insert("preset", preset.name().to_string());
                kv.insert("rate", rate.to_string());
                kv.insert("duration_s", duration_s.to_string());
            }
        }
        match &self.throughput {
            None => {
                kv.insert("throughput_slo", "none".into());
            }
            Some(t) => {
                kv.insert("throughput_slo", t.slo.to_string());
                kv.insert("throughput_min_rps", t.min_rps.to_string());
                kv.insert("throughput_max_rps", t.max_rps.to_string());
                kv.insert("throughput_steps", t.steps.to_string());
            }
        }
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Generates a preset workload. The trace retrieves `k` documents per request.
pub fn generate(
    preset: Preset,
    rate: f64,
    duration_s: f64,
    k: usize,
    seed: u64,
) -> Result<Workload> {
    let corpus = generate_corpus_seeded(&preset.corpus_spec(), seed)?;
    let spec = TraceSpec {
        k,
        ..preset.trace_spec(rate, duration_s, seed)
    };
    let trace = generate_trace_seeded(&corpus, &spec)?;
    Ok(Workload {
        corpus,
        trace,
        rate_rps: rate,
    })
}
