//! `ragsim`: generate workloads, run single simulations and sweep grids.
//!
//! Exit status is 0 on success, 1 when a simulation fails and 2 for usage
//! or I/O errors. Each `run` and `sweep` prints its effective settings to
//! stderr as `key=value` lines; saving that block and passing it back with
//! `--config` reproduces the run.

mod settings;
mod sweep;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ragsim::cost_model::TransferModel;
use ragsim::knowledge_tree::ReplacementPolicy;
use ragsim::simulator::{measure_throughput, run};
use ragsim::workload::Preset;

use settings::{Layers, Settings};

#[derive(Parser)]
#[command(
    name = "ragsim",
    version,
    about = "Discrete-event simulator for RAG serving with multilevel KV caching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (CSV) and request trace (JSONL).
    Generate(GenerateArgs),
    /// Simulate one configuration and write its report.
    Run(RunArgs),
    /// Simulate a grid of configurations in parallel and write one CSV row per cell.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "mmlu")]
    preset: Preset,
    /// Mean arrival rate in requests per second.
    #[arg(long, default_value_t = 0.8)]
    rate: f64,
    /// Trace length in seconds.
    #[arg(long, default_value_t = 3600.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Documents retrieved per request.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "corpus.csv")]
    corpus_out: PathBuf,
    #[arg(long, default_value = "trace.jsonl")]
    trace_out: PathBuf,
}

/// Settings shared by `run` and `sweep`. Named flags override `--set`,
/// which overrides `--config`, which overrides built-in defaults.
#[derive(Args)]
struct SettingArgs {
    /// Flat `key=value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    policy: Option<ReplacementPolicy>,
    /// Speculative pipelining: on or off.
    #[arg(long)]
    dsp: Option<String>,
    /// Cache-aware reordering: on or off.
    #[arg(long)]
    reorder: Option<String>,
    #[arg(long)]
    window: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    /// GPU tier capacity in tokens.
    #[arg(long)]
    gpu_capacity: Option<u64>,
    /// Host tier capacity in tokens.
    #[arg(long)]
    host_capacity: Option<u64>,
    /// GPU tier capacity in GiB, converted with kv_bytes_per_token.
    #[arg(long)]
    gpu_gib: Option<f64>,
    /// Host tier capacity in GiB, converted with kv_bytes_per_token.
    #[arg(long)]
    host_gib: Option<f64>,
    #[arg(long)]
    kv_bytes_per_token: Option<f64>,
    /// Prefill cost profile CSV; synthetic when absent.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Corpus CSV; requires --trace.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Trace JSONL; requires --corpus.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Generate the workload from a preset instead of reading files.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    rate: Option<f64>,
    /// Generated trace length in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    settings: SettingArgs,
    /// Report JSON destination; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-request CSV destination.
    #[arg(long)]
    requests_csv: Option<PathBuf>,
    /// Also search for the highest rate whose mean TTFT stays within this
    /// multiple of the low-load mean.
    #[arg(long)]
    throughput_slo: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    settings: SettingArgs,
    #[arg(long, value_delimiter = ',', default_values = ["pgdsf", "gdsf", "lru", "lfu"])]
    policies: Vec<ReplacementPolicy>,
    /// Host capacities in tokens.
    #[arg(long, value_delimiter = ',', conflicts_with = "host_gibs")]
    host_capacities: Vec<u64>,
    /// Host capacities in GiB.
    #[arg(long, value_delimiter = ',')]
    host_gibs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values = ["0", "1", "2"])]
    seeds: Vec<u64>,
    /// Speculation settings to sweep, e.g. `on,off`.
    #[arg(long = "dsp-values", value_delimiter = ',')]
    dsp_values: Vec<String>,
    /// Retrieval widths to sweep.
    #[arg(long = "k-values", value_delimiter = ',')]
    k_values: Vec<usize>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure and the exit status it maps to.
enum Failure {
    Usage(anyhow::Error),
    Simulation(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn simulation(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn simulation(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Simulation(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Simulation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes to `path`, or to stdout when `path` is absent.
fn write_out(path: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            body(&mut w)?;
            w.flush()
                .with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut w = io::stdout().lock();
            body(&mut w)?;
            w.flush().context("writing stdout")
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Failure> {
    let w = settings::generate(a.preset, a.rate, a.duration, a.k, a.seed).usage()?;
    let mut c = create(&a.corpus_out).usage()?;
    w.corpus
        .write_csv(&mut c)
        .with_context(|| format!("writing {}", a.corpus_out.display()))
        .usage()?;
    let mut t = create(&a.trace_out).usage()?;
    w.trace
        .write_jsonl(&mut t)
        .with_context(|| format!("writing {}", a.trace_out.display()))
        .usage()?;
    eprintln!(
        "wrote {} documents to {} and {} requests to {}",
        w.corpus.len(),
        a.corpus_out.display(),
        w.trace.len(),
        a.trace_out.display()
    );
    Ok(())
}

fn resolve(a: &SettingArgs, extra: &[(&str, String)]) -> Result<Settings> {
    let mut layers = Layers::default();
    if let Some(p) = &a.config {
        layers.merge_file(p)?;
    }
    for s in &a.set {
        layers.merge_assignment(s)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags: [(&str, Option<String>); 17] = [
        ("policy", a.policy.map(|p| p.name().to_string())),
        ("dsp", a.dsp.clone()),
        ("reorder", a.reorder.clone()),
        ("window", a.window.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        (
            "kv_bytes_per_token",
            a.kv_bytes_per_token.map(|v| v.to_string()),
        ),
        ("gpu_capacity", a.gpu_capacity.map(|v| v.to_string())),
        ("host_capacity", a.host_capacity.map(|v| v.to_string())),
        ("gpu_gib", a.gpu_gib.map(|v| v.to_string())),
        ("host_gib", a.host_gib.map(|v| v.to_string())),
        ("profile", path(&a.profile)),
        ("corpus", path(&a.corpus)),
        ("trace", path(&a.trace)),
        ("preset", a.preset.map(|p| p.name().to_string())),
        ("rate", a.rate.map(|v| v.to_string())),
        ("duration_s", a.duration.map(|v| v.to_string())),
    ];
    for (k, v) in flags
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (*k, v)))
    {
        layers.set(k, v)?;
    }
    for (k, v) in extra {
        layers.set(k, v)?;
    }
    let s = Settings::resolve(&layers)?;
    eprint!("# effective settings\n{}", s.render());
    for w in s.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(s)
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let extra: Vec<_> = a
        .throughput_slo
        .map(|v| ("throughput_slo", v.to_string()))
        .into_iter()
        .collect();
    let s = resolve(&a.settings, &extra).usage()?;
    let profile = s.load_profile().usage()?;
    let w = s.load_workload().usage()?;

    let mut report = run(&s.sim, &profile, w.corpus.sizes(), &w.trace).simulation()?;
    if let Some(t) = s.throughput {
        let found = measure_throughput(
            &s.sim,
            &profile,
            w.corpus.sizes(),
            &w.trace,
            w.rate_rps,
            (t.min_rps, t.max_rps),
            t.slo,
            t.steps,
        )
        .simulation()?;
        report.aggregates.throughput_at_slo_rps = Some(found.rate_rps);
    }

    write_out(a.report.as_deref(), |out| Ok(report.write_json(out)?)).usage()?;
    if let Some(p) = &a.requests_csv {
        let f = create(p).usage()?;
        report
            .write_requests_csv(f)
            .with_context(|| format!("writing {}", p.display()))
            .usage()?;
    }
    let g = &report.aggregates;
    eprintln!(
        "{} requests: mean TTFT {:.2} ms, document hit rate {:.4}, {} invariant violations",
        g.requests, g.mean_ttft_ms, g.document_hit_rate, g.invariant_violations
    );
    if g.invariant_violations > 0 {
        return Err(Failure::Simulation(anyhow::anyhow!(
            "invariant violated: {}",
            report.violations.first().map_or("", String::as_str)
        )));
    }
    Ok(())
}

fn parse_on_off(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => anyhow::bail!("invalid speculation value `{v}`: expected on or off"),
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let s = resolve(&a.settings, &[]).usage()?;
    let profile = s.load_profile().usage()?;
    let host_capacities = if !a.host_gibs.is_empty() {
        let t: TransferModel = s.sim.transfer;
        a.host_gibs.iter().map(|g| t.tokens_for_gib(*g)).collect()
    } else if !a.host_capacities.is_empty() {
        a.host_capacities.clone()
    } else {
        vec![s.sim.host_capacity]
    };
    let dsp = if a.dsp_values.is_empty() {
        vec![s.sim.dsp]
    } else {
        a.dsp_values
            .iter()
            .map(|v| parse_on_off(v))
            .collect::<Result<_>>()
            .usage()?
    };
    let grid = sweep::Grid {
        policies: a.policies.clone(),
        host_capacities,
        seeds: a.seeds.clone(),
        dsp,
        k: if a.k_values.is_empty() {
            vec![s.sim.k]
        } else {
            a.k_values.clone()
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .context("starting worker threads")
        .usage()?;
    let rows = pool
        .install(|| sweep::run_grid(&s, &grid, &profile))
        .simulation()?;
    write_out(a.out.as_deref(), |out| Ok(sweep::write_csv(&rows, out)?)).usage()?;
    let violations: u64 = rows.iter().map(|r| r.aggregates.invariant_violations).sum();
    eprintln!("{} cells, {} invariant violations", rows.len(), violations);
    if violations > 0 {
        return Err(Failure::Simulation(anyhow::anyhow!(
            "{violations} invariant violations across the sweep"
        )));
    }
    Ok(())
}
