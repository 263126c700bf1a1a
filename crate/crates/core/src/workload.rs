//! Synthetic corpora and request traces.
//!
//! Document popularity is Zipf over document ids (id 0 is the most popular),
//! lengths are lognormal, arrivals are Poisson and each request draws `k`
//! distinct documents by popularity, keeping draw order.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_tree::DocumentId;
use crate::simulator::{Request, Trace};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}` (expected mmlu, nq or long)")]
    UnknownPreset(String),
    #[error("malformed corpus file: {0}")]
    MalformedCorpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Lognormal parameterized by its mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub mean: f64,
    pub sd: f64,
}

impl LengthDist {
    fn lognormal(&self) -> Result<LogNormal<f64>, WorkloadError> {
        if !(self.mean > 0.0 && self.sd >= 0.0 && self.mean.is_finite() && self.sd.is_finite()) {
            return Err(WorkloadError::InvalidSpec(format!(
                "length distribution needs mean > 0 and sd >= 0, got {self:?}"
            )));
        }
        let sigma2 = (1.0 + (self.sd / self.mean).powi(2)).ln();
        let mu = self.mean.ln() - sigma2 / 2.0;
        LogNormal::new(mu, sigma2.sqrt()).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_docs: u32,
    pub doc_length: LengthDist,
    /// Zipf exponent; 0 is uniform.
    pub zipf_s: f64,
}

/// Token counts drawn per request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TokenCount {
    Fixed {
        tokens: u64,
    },
    /// Lognormal rounded to whole tokens and clipped to `[1, max]`.
    LogNormal {
        mean: f64,
        sd: f64,
        max: u64,
    },
}

impl TokenCount {
    fn sampler(&self) -> Result<TokenSampler, WorkloadError> {
        match *self {
            TokenCount::Fixed { tokens } if tokens >= 1 => Ok(TokenSampler::Fixed(tokens)),
            TokenCount::Fixed { .. } => Err(WorkloadError::InvalidSpec(
                "token count must be >= 1".into(),
            )),
            TokenCount::LogNormal { mean, sd, max } => {
                if max < 1 {
                    return Err(WorkloadError::InvalidSpec("token cap must be >= 1".into()));
                }
                Ok(TokenSampler::LogNormal(
                    LengthDist { mean, sd }.lognormal()?,
                    max,
                ))
            }
        }
    }
}

enum TokenSampler {
    Fixed(u64),
    LogNormal(LogNormal<f64>, u64),
}

impl TokenSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            TokenSampler::Fixed(t) => *t,
            TokenSampler::LogNormal(d, max) => (d.sample(rng).round() as u64).clamp(1, *max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub duration_s: f64,
    pub arrival_rate: f64,
    pub k: usize,
    pub prompt_tokens: TokenCount,
    pub output_tokens: TokenCount,
    pub seed: u64,
}

/// Named workload shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Multiple-choice QA: strong skew, one output token.
    Mmlu,
    /// Open QA: milder skew, short free-form answers.
    Nq,
    /// MMLU skew with full-length documents.
    Long,
}

/// Zipf exponent giving a 60% share to the top 3% of 10,000 documents.
pub const MMLU_ZIPF_S: f64 = 0.96;
pub const NQ_ZIPF_S: f64 = 0.8;

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Mmlu, Preset::Nq, Preset::Long];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mmlu => "mmlu",
            Preset::Nq => "nq",
            Preset::Long => "long",
        }
    }

    pub fn corpus_spec(self) -> CorpusSpec {
        match self {
            Preset::Mmlu => CorpusSpec {
                num_docs: 10_000,
                doc_length: LengthDist {
                    mean: 600.0,
                    sd: 400.0,
                },
                zipf_s: MMLU_ZIPF_S,
            },
            Preset::Nq => CorpusSpec {
                num_docs: 10_000,
                doc_length: LengthDist {
                    mean: 600.0,
                    sd: 400.0,
                },
                zipf_s: NQ_ZIPF_S,
            },
            Preset::Long => CorpusSpec {
                num_docs: 10_000,
                doc_length: LengthDist {
                    mean: 3718.0,
                    sd: 2000.0,
                },
                zipf_s: MMLU_ZIPF_S,
            },
        }
    }

    pub fn trace_spec(self, arrival_rate: f64, duration_s: f64, seed: u64) -> TraceSpec {
        let output_tokens = match self {
            Preset::Mmlu | Preset::Long => TokenCount::Fixed { tokens: 1 },
            Preset::Nq => TokenCount::LogNormal {
                mean: 6.0,
                sd: 4.0,
                max: 32,
            },
        };
        TraceSpec {
            duration_s,
            arrival_rate,
            k: 2,
            prompt_tokens: TokenCount::Fixed { tokens: 32 },
            output_tokens,
            seed,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mmlu" => Ok(Preset::Mmlu),
            "nq" => Ok(Preset::Nq),
            "long" => Ok(Preset::Long),
            _ => Err(WorkloadError::UnknownPreset(s.to_string())),
        }
    }
}

/// Document sizes and normalized popularity weights, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sizes: Vec<u64>,
    weights: Vec<f64>,
}

impl Corpus {
    pub fn new(sizes: Vec<u64>, weights: Vec<f64>) -> Result<Self, WorkloadError> {
        if sizes.is_empty() || sizes.len() != weights.len() {
            return Err(WorkloadError::MalformedCorpus(format!(
                "{} sizes and {} weights",
                sizes.len(),
                weights.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(WorkloadError::MalformedCorpus(
                "zero-length document".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(WorkloadError::MalformedCorpus(
                "negative or non-finite weight".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(WorkloadError::MalformedCorpus("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { sizes, weights })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn size(&self, doc: DocumentId) -> Option<u64> {
        self.sizes.get(doc.0 as usize).copied()
    }

    pub fn total_tokens(&self) -> u64 {
        self.sizes.iter().sum()
    }

    /// Share of popularity mass held by the top `fraction` of documents.
    pub fn top_share(&self, fraction: f64) -> f64 {
        let mut w = self.weights.clone();
        w.sort_by(|a, b| b.total_cmp(a));
        let n = ((w.len() as f64 * fraction).round() as usize).max(1);
        w[..n].iter().sum()
    }

    pub fn sampler(&self) -> DocSampler {
        DocSampler {
            index: WeightedIndex::new(&self.weights).expect("validated weights"),
        }
    }

    /// CSV with header `doc_id,token_size,weight`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), WorkloadError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["doc_id", "token_size", "weight"])?;
        for (i, (s, p)) in self.sizes.iter().zip(&self.weights).enumerate() {
            w.write_record([i.to_string(), s.to_string(), format!("{p:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`Self::write_csv`]. Ids must be `0..n` in
    /// order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, WorkloadError> {
        #[derive(Deserialize)]
        struct Row {
            doc_id: u32,
            token_size: u64,
            weight: f64,
        }
        let mut sizes = Vec::new();
        let mut weights = Vec::new();
        for (i, row) in csv::Reader::from_reader(reader)
            .deserialize::<Row>()
            .enumerate()
        {
            let row = row?;
            if row.doc_id as usize != i {
                return Err(WorkloadError::MalformedCorpus(format!(
                    "row {i} has doc_id {}; ids must be dense and ascending",
                    row.doc_id
                )));
            }
            sizes.push(row.token_size);
            weights.push(row.weight);
        }
        Self::new(sizes, weights)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, WorkloadError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Popularity-weighted document draws.
#[derive(Debug, Clone)]
pub struct DocSampler {
    index: WeightedIndex<f64>,
}

impl DocSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DocumentId {
        DocumentId(self.index.sample(rng) as u32)
    }

    /// `k` distinct documents in draw order. `k` must not exceed the number
    /// of documents with positive weight.
    pub fn draw_distinct<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<DocumentId> {
        let mut out: Vec<DocumentId> = Vec::with_capacity(k);
        while out.len() < k {
            let d = self.draw(rng);
            if !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }
}

pub fn zipf_weights(n: u32, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn generate_corpus<R: Rng + ?Sized>(
    spec: &CorpusSpec,
    rng: &mut R,
) -> Result<Corpus, WorkloadError> {
    if spec.num_docs == 0 {
        return Err(WorkloadError::InvalidSpec("num_docs must be >= 1".into()));
    }
    if !(spec.zipf_s >= 0.0 && spec.zipf_s.is_finite()) {
        return Err(WorkloadError::InvalidSpec(format!(
            "zipf exponent {} must be >= 0",
            spec.zipf_s
        )));
    }
    let len = spec.doc_length.lognormal()?;
    let sizes = (0..spec.num_docs)
        .map(|_| (len.sample(rng).round() as u64).max(1))
        .collect();
    Corpus::new(sizes, zipf_weights(spec.num_docs, spec.zipf_s))
}

/// Corpus from a seed alone.
pub fn generate_corpus_seeded(spec: &CorpusSpec, seed: u64) -> Result<Corpus, WorkloadError> {
    generate_corpus(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn generate_trace<R: Rng + ?Sized>(
    corpus: &Corpus,
    spec: &TraceSpec,
    rng: &mut R,
) -> Result<Trace, WorkloadError> {
    if !(spec.arrival_rate > 0.0 && spec.arrival_rate.is_finite()) {
        return Err(WorkloadError::InvalidSpec(
            "arrival rate must be > 0".into(),
        ));
    }
    if !(spec.duration_s >= 0.0 && spec.duration_s.is_finite()) {
        return Err(WorkloadError::InvalidSpec("duration must be >= 0".into()));
    }
    let reachable = corpus.weights().iter().filter(|w| **w > 0.0).count();
    if spec.k == 0 || spec.k > reachable {
        return Err(WorkloadError::InvalidSpec(format!(
            "k = {} must be in 1..={reachable}",
            spec.k
        )));
    }
    let gap = Exp::new(spec.arrival_rate).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
    let prompt = spec.prompt_tokens.sampler()?;
    let output = spec.output_tokens.sampler()?;
    let docs = corpus.sampler();
    let horizon_ms = spec.duration_s * 1000.0;
    let mut t = 0.0;
    let mut requests = Vec::new();
    loop {
        t += gap.sample(rng) * 1000.0;
        if t > horizon_ms {
            break;
        }
        requests.push(Request {
            id: requests.len() as u64,
            arrival_ms: t,
            prompt_tokens: prompt.sample(rng),
            docs: docs.draw_distinct(spec.k, rng),
            output_tokens: output.sample(rng),
        });
    }
    Ok(Trace::new(requests))
}

/// Trace from `spec.seed` alone.
pub fn generate_trace_seeded(corpus: &Corpus, spec: &TraceSpec) -> Result<Trace, WorkloadError> {
    generate_trace(corpus, spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn mmlu() -> Corpus {
        generate_corpus_seeded(&Preset::Mmlu.corpus_spec(), 1).unwrap()
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let spec = Preset::Nq.corpus_spec();
        assert_eq!(
            generate_corpus_seeded(&spec, 4).unwrap(),
            generate_corpus_seeded(&spec, 4).unwrap()
        );
        assert_ne!(
            generate_corpus_seeded(&spec, 4).unwrap(),
            generate_corpus_seeded(&spec, 5).unwrap()
        );
    }

    #[test]
    fn weights_normalized_and_lengths_positive() {
        let c = mmlu();
        assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(c.sizes().iter().all(|s| *s >= 1));
        let mean = c.total_tokens() as f64 / c.len() as f64;
        assert!((mean - 600.0).abs() < 20.0, "mean length {mean}");
    }

    #[test]
    fn long_preset_mean_length() {
        let c = generate_corpus_seeded(&Preset::Long.corpus_spec(), 2).unwrap();
        let mean = c.total_tokens() as f64 / c.len() as f64;
        assert!((mean - 3718.0).abs() < 100.0, "mean length {mean}");
    }

    #[test]
    fn uniform_popularity_at_zero_exponent() {
        let spec = CorpusSpec {
            zipf_s: 0.0,
            ..Preset::Mmlu.corpus_spec()
        };
        let c = generate_corpus_seeded(&spec, 0).unwrap();
        assert!((c.top_share(0.03) - 0.03).abs() < 1e-9);
    }

    #[test]
    fn mmlu_skew_matches_target() {
        let share = mmlu().top_share(0.03);
        assert!((share - 0.60).abs() < 0.01, "top 3% share {share}");
    }

    #[test]
    fn draws_are_distinct_and_ordered() {
        let c = mmlu();
        let spec = TraceSpec {
            k: 4,
            ..Preset::Mmlu.trace_spec(5.0, 200.0, 3)
        };
        let t = generate_trace_seeded(&c, &spec).unwrap();
        for r in t.requests() {
            assert_eq!(r.docs.len(), 4);
            let mut d = r.docs.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 4);
            assert!(r.docs.iter().all(|d| (d.0 as usize) < c.len()));
        }
    }

    #[test]
    fn k_one_and_trace_determinism() {
        let c = mmlu();
        let spec = TraceSpec {
            k: 1,
            ..Preset::Nq.trace_spec(2.0, 100.0, 8)
        };
        let a = generate_trace_seeded(&c, &spec).unwrap();
        assert!(a.requests().iter().all(|r| r.docs.len() == 1));
        assert_eq!(a, generate_trace_seeded(&c, &spec).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        let c = mmlu();
        let base = Preset::Mmlu.trace_spec(1.0, 10.0, 0);
        assert!(generate_trace_seeded(&c, &TraceSpec { k: 0, ..base }).is_err());
        assert!(generate_trace_seeded(
            &c,
            &TraceSpec {
                arrival_rate: 0.0,
                ..base
            }
        )
        .is_err());
        let spec = CorpusSpec {
            num_docs: 0,
            ..Preset::Mmlu.corpus_spec()
        };
        assert!(generate_corpus_seeded(&spec, 0).is_err());
        assert!(matches!(
            "arc".parse::<Preset>(),
            Err(WorkloadError::UnknownPreset(_))
        ));
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn poisson_count_and_exponential_gaps() {
        let c = mmlu();
        let t = generate_trace_seeded(&c, &Preset::Mmlu.trace_spec(1.0, 3600.0, 11)).unwrap();
        let n = t.len() as f64;
        assert!((n - 3600.0).abs() <= 3.0 * 60.0, "{n} arrivals");

        // Kolmogorov-Smirnov against Exp(1) at alpha = 0.01.
        let mut gaps: Vec<f64> = t
            .requests()
            .windows(2)
            .map(|w| (w[1].arrival_ms - w[0].arrival_ms) / 1000.0)
            .collect();
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len() as f64;
        let d = gaps
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = 1.0 - (-x).exp();
                (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / m.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn draw_frequencies_follow_weights() {
        // Chi-squared goodness of fit over 10^6 single draws.
        let spec = CorpusSpec {
            num_docs: 200,
            ..Preset::Mmlu.corpus_spec()
        };
        let c = generate_corpus_seeded(&spec, 3).unwrap();
        let s = c.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1_000_000;
        let mut counts = vec![0u64; c.len()];
        for _ in 0..draws {
            counts[s.draw(&mut rng).0 as usize] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(c.weights())
            .map(|(o, w)| {
                let e = w * draws as f64;
                (*o as f64 - e).powi(2) / e
            })
            .sum();
        let crit = ChiSquared::new((c.len() - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn output_lengths_are_short() {
        let c = mmlu();
        let t = generate_trace_seeded(&c, &Preset::Nq.trace_spec(5.0, 2000.0, 2)).unwrap();
        let mut out: Vec<u64> = t.requests().iter().map(|r| r.output_tokens).collect();
        let mean = out.iter().sum::<u64>() as f64 / out.len() as f64;
        out.sort();
        let p99 = out[out.len() * 99 / 100];
        assert!((mean - 6.0).abs() < 0.5, "mean output {mean}");
        assert!(p99 <= 32);
        let t = generate_trace_seeded(&c, &Preset::Mmlu.trace_spec(5.0, 100.0, 2)).unwrap();
        assert!(t
            .requests()
            .iter()
            .all(|r| r.output_tokens == 1 && r.prompt_tokens == 32));
    }

    #[test]
    fn corpus_csv_round_trip() {
        let spec = CorpusSpec {
            num_docs: 50,
            ..Preset::Nq.corpus_spec()
        };
        let c = generate_corpus_seeded(&spec, 6).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"doc_id,token_size,weight\n"));
        let back = Corpus::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.sizes(), c.sizes());
        for (a, b) in back.weights().iter().zip(c.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(Corpus::read_csv("doc_id,token_size,weight\n1,5,1.0\n".as_bytes()).is_err());
    }
}
