//! Experiment runner: parses TOML experiment specs, fans independent
//! protocol runs out over a thread pool, and writes JSON results (plus CSV
//! tables for sweeps and JSONL transcripts for audit tooling).
//!
//! Exit codes: 0 ok, 2 config error, 3 runtime error, 4 audit violation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use relverify_core::adversary::{build_strategy, StrategySpec};
use relverify_core::protocol::{
    audit_transcript, azuma_bound, loss_tolerance, run_protocol, threshold, ProtocolConfig,
    TranscriptRecord, Verdict,
};
use relverify_core::stats::{MartingaleTrace, McEstimate};
use relverify_core::{rng_for_run, Error as CoreError, SimRng};

const RESULTS_SCHEMA_VERSION: u32 = 1;
const WORKERS_ENV: &str = "RELVERIFY_WORKERS";

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_RUNTIME: i32 = 3;
const EXIT_AUDIT: i32 = 4;

#[derive(Parser)]
#[command(name = "relverify", about = "Relativistic verification experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute the experiment described by a TOML spec.
    Run {
        spec: PathBuf,
        /// Results JSON destination (default: spec's output.results, else stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also record one fully-evented run and write it as JSONL.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Re-run the spec once per value of a numeric axis; emit a CSV table.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse the spec and check geometry/config consistency only.
    Validate { spec: PathBuf },
    /// Causality/linearity audit of a JSONL transcript.
    Audit { transcript: PathBuf },
}

/// A full experiment description. Seeds are mandatory so every published
/// number is replayable.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExperimentSpec {
    seed: u64,
    trials: u64,
    #[serde(default = "default_confidence")]
    confidence: f64,
    /// Worker threads; absent or 0 = library default. The RELVERIFY_WORKERS
    /// environment variable overrides this.
    #[serde(default)]
    workers: Option<usize>,
    protocol: ProtocolConfig,
    strategy: StrategySpec,
    #[serde(default)]
    output: OutputSpec,
}

fn default_confidence() -> f64 {
    0.99
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct OutputSpec {
    #[serde(default)]
    results: Option<PathBuf>,
    #[serde(default)]
    transcript: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct SiteResult {
    site: usize,
    accept: McEstimate,
    reject_count: u64,
    inconclusive_count: u64,
    /// Per-qudit pass probability over all rounds of all trials.
    pass: McEstimate,
    returned_count: u64,
    matched_count: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct BoundsBlock {
    azuma: f64,
    loss_tolerance: f64,
    two_site_bound: f64,
    threshold: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ResultsDocument {
    schema_version: u32,
    spec: ExperimentSpec,
    strategy_name: String,
    per_site: Vec<SiteResult>,
    /// Sum over sites of the per-site accept-probability point estimates.
    accept_sum: f64,
    /// Sum over sites of the per-qudit pass-probability point estimates.
    pass_sum: f64,
    bounds: BoundsBlock,
    aborted_runs: u64,
    probe_counts: Vec<u64>,
    wall_time_secs: f64,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_)
            | CoreError::Argument(_)
            | CoreError::GeometryInvalid(_)
            | CoreError::Geometry(_)
            | CoreError::UnsupportedStrategy(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.cmd {
        Cmd::Run {
            spec,
            out,
            transcript,
        } => {
            let parsed = load_spec(&spec)?;
            let doc = run_experiment(&parsed, transcript.or(parsed.output.transcript.clone()))?;
            let json = serde_json::to_string_pretty(&doc)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            match out.or(parsed.output.results.clone()) {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
            Ok(EXIT_OK)
        }
        Cmd::Sweep {
            spec,
            axis,
            values,
            out,
        } => {
            let parsed = load_spec(&spec)?;
            let csv = sweep(&parsed, &axis, &values)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        Cmd::Validate { spec } => {
            let parsed = load_spec(&spec)?;
            parsed.protocol.validate().map_err(|e| {
                if let CoreError::GeometryInvalid(report) = &e {
                    CliError::Config(format!("{report}"))
                } else {
                    CliError::Config(e.to_string())
                }
            })?;
            // Strategy construction doubles as parameter validation.
            let mut rng = construction_rng(parsed.seed);
            build_strategy(&parsed.strategy, parsed.protocol.d, &mut rng)?;
            println!("ok");
            Ok(EXIT_OK)
        }
        Cmd::Audit { transcript } => {
            let file = std::fs::File::open(&transcript)?;
            let record = TranscriptRecord::read_jsonl(std::io::BufReader::new(file))?;
            let report = audit_transcript(&record);
            println!(
                "events checked: {}; causality violations: {}; linearity violations: {}",
                report.events_checked,
                report.causality_violations.len(),
                report.linearity_violations.len()
            );
            for v in report
                .causality_violations
                .iter()
                .chain(report.linearity_violations.iter())
            {
                println!("violation: {v}");
            }
            if report.is_clean() && !record.aborted {
                Ok(EXIT_OK)
            } else {
                if record.aborted && report.is_clean() {
                    println!("violation: transcript marked aborted");
                }
                Ok(EXIT_AUDIT)
            }
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec: ExperimentSpec = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if spec.trials < 1 {
        return Err(CliError::Config("trials must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&spec.confidence) {
        return Err(CliError::Config("confidence must lie in (0, 1)".into()));
    }
    Ok(spec)
}

/// Stream 0 of the seed is reserved for strategy construction randomness
/// (decoys, random collective unitaries); runs use streams 1..=trials.
fn construction_rng(seed: u64) -> SimRng {
    relverify_core::rng_for_setup(seed)
}

#[derive(Default, Clone)]
struct Aggregate {
    accepts: Vec<u64>,
    rejects: Vec<u64>,
    inconclusives: Vec<u64>,
    passes: Vec<u64>,
    returned: Vec<u64>,
    matched: Option<Vec<u64>>,
    rounds: u64,
    aborted: u64,
    probes: Vec<u64>,
}

impl Aggregate {
    fn sized(n_sites: usize, probes: usize, matched: bool) -> Self {
        Aggregate {
            accepts: vec![0; n_sites],
            rejects: vec![0; n_sites],
            inconclusives: vec![0; n_sites],
            passes: vec![0; n_sites],
            returned: vec![0; n_sites],
            matched: matched.then(|| vec![0; n_sites]),
            rounds: 0,
            aborted: 0,
            probes: vec![0; probes],
        }
    }

    fn absorb(mut self, t: &TranscriptRecord) -> Self {
        for (j, v) in t.verdicts.iter().enumerate() {
            match v {
                Verdict::Accept => self.accepts[j] += 1,
                Verdict::Reject => self.rejects[j] += 1,
                Verdict::Inconclusive => self.inconclusives[j] += 1,
            }
        }
        for j in 0..t.tally.pass_counts.len() {
            self.passes[j] += t.tally.pass_counts[j];
            self.returned[j] += t.tally.returned_counts[j];
        }
        if let (Some(acc), Some(m)) = (self.matched.as_mut(), t.tally.matched_counts.as_ref()) {
            for j in 0..m.len() {
                acc[j] += m[j];
            }
        }
        self.rounds += t.tally.rounds as u64;
        self.aborted += t.aborted as u64;
        for (a, b) in self.probes.iter_mut().zip(t.probe_counts.iter()) {
            *a += b;
        }
        self
    }

    fn merge(mut self, other: Aggregate) -> Self {
        for j in 0..self.accepts.len() {
            self.accepts[j] += other.accepts[j];
            self.rejects[j] += other.rejects[j];
            self.inconclusives[j] += other.inconclusives[j];
            self.passes[j] += other.passes[j];
            self.returned[j] += other.returned[j];
        }
        if let (Some(a), Some(b)) = (self.matched.as_mut(), other.matched.as_ref()) {
            for j in 0..b.len() {
                a[j] += b[j];
            }
        }
        self.rounds += other.rounds;
        self.aborted += other.aborted;
        for (a, b) in self.probes.iter_mut().zip(other.probes.iter()) {
            *a += b;
        }
        self
    }
}

fn resolve_workers(spec: &ExperimentSpec) -> Option<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                return Some(n);
            }
        }
    }
    spec.workers.filter(|&n| n > 0)
}

fn run_experiment(
    spec: &ExperimentSpec,
    transcript_out: Option<PathBuf>,
) -> Result<ResultsDocument, CliError> {
    let start = Instant::now();
    spec.protocol.validate()?;
    let mut ctor_rng = construction_rng(spec.seed);
    let strategy = build_strategy(&spec.strategy, spec.protocol.d, &mut ctor_rng)?;
    let n_sites = spec.protocol.geometry.branches.len();
    let is_b3 = matches!(
        spec.protocol.verify_mode,
        relverify_core::protocol::VerifyMode::B3 { .. }
    );
    let probes_len = n_sites * spec.protocol.d;

    let body = || -> Result<Aggregate, CoreError> {
        (0..spec.trials)
            .into_par_iter()
            .map(|run| {
                let mut rng = rng_for_run(spec.seed, run);
                run_protocol(&spec.protocol, strategy.as_ref(), &mut rng)
            })
            .try_fold(
                || Aggregate::sized(n_sites, probes_len, is_b3),
                |acc, t| t.map(|t| acc.absorb(&t)),
            )
            .try_reduce(
                || Aggregate::sized(n_sites, probes_len, is_b3),
                |a, b| Ok(a.merge(b)),
            )
    };

    let agg = match resolve_workers(spec) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(body),
        None => body(),
    }?;

    if let Some(path) = transcript_out {
        // One additional fully-evented run on the reserved stream just past
        // the Monte Carlo range.
        let mut config = spec.protocol.clone();
        config.record_events = true;
        config.record_probes = true;
        let mut rng = rng_for_run(spec.seed, spec.trials);
        let t = run_protocol(&config, strategy.as_ref(), &mut rng)?;
        let file = std::fs::File::create(&path)?;
        t.write_jsonl(std::io::BufWriter::new(file))?;
    }

    let mut per_site = Vec::with_capacity(n_sites);
    for j in 0..n_sites {
        let round_basis = match (agg.matched.as_ref(), agg.rounds) {
            (Some(m), _) => m[j].max(1),
            (None, r) => r.max(1),
        };
        per_site.push(SiteResult {
            site: j,
            accept: McEstimate::from_counts(agg.accepts[j], spec.trials, spec.confidence)?,
            reject_count: agg.rejects[j],
            inconclusive_count: agg.inconclusives[j],
            pass: McEstimate::from_counts(agg.passes[j], round_basis, spec.confidence)?,
            returned_count: agg.returned[j],
            matched_count: agg.matched.as_ref().map(|m| m[j]),
        });
    }
    let accept_sum: f64 = per_site.iter().map(|s| s.accept.point).sum();
    let pass_sum: f64 = per_site.iter().map(|s| s.pass.point).sum();
    let p = &spec.protocol;
    Ok(ResultsDocument {
        schema_version: RESULTS_SCHEMA_VERSION,
        spec: spec.clone(),
        strategy_name: strategy.name(),
        per_site,
        accept_sum,
        pass_sum,
        bounds: BoundsBlock {
            azuma: azuma_bound(p.n, p.d, p.epsilon)?,
            loss_tolerance: loss_tolerance(p.d),
            two_site_bound: MartingaleTrace::two_site_bound(p.d),
            threshold: threshold(p.n, p.d, p.epsilon, p.threshold_convention),
        },
        aborted_runs: agg.aborted,
        probe_counts: agg.probes,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn set_axis(spec: &mut ExperimentSpec, axis: &str, value: f64) -> Result<(), CliError> {
    let as_usize = |v: f64| -> Result<usize, CliError> {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CliError::Config(format!(
                "axis value {v} is not a non-negative integer"
            )));
        }
        Ok(v as usize)
    };
    match axis {
        "d" => spec.protocol.d = as_usize(value)?,
        "n" => spec.protocol.n = as_usize(value)?,
        "epsilon" => spec.protocol.epsilon = value,
        "loss_prob" => spec.protocol.loss.loss_prob = value,
        "depolarize_prob" => spec.protocol.loss.depolarize_prob = value,
        "accept_fraction_override" => spec.protocol.accept_fraction_override = Some(value),
        "bob_speed_limit" => spec.protocol.bob_speed_limit = value,
        "trials" => spec.trials = as_usize(value)? as u64,
        "fraction" => match &mut spec.strategy {
            StrategySpec::Split { fraction } => *fraction = value,
            _ => {
                return Err(CliError::Config(
                    "axis 'fraction' requires the split strategy".into(),
                ))
            }
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep axis '{other}' (known: d, n, epsilon, loss_prob, \
                 depolarize_prob, accept_fraction_override, bob_speed_limit, trials, fraction)"
            )))
        }
    }
    Ok(())
}

fn sweep(spec: &ExperimentSpec, axis: &str, values: &[f64]) -> Result<String, CliError> {
    let mut csv = String::from(
        "axis,value,site,trials,accepts,accept_rate,accept_lo,accept_hi,\
         pass_rate,pass_lo,pass_hi,azuma,loss_tolerance\n",
    );
    for &value in values {
        let mut point = spec.clone();
        set_axis(&mut point, axis, value)?;
        let doc = run_experiment(&point, None)?;
        for site in &doc.per_site {
            csv.push_str(&format!(
                "{axis},{value},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                site.site,
                point.trials,
                site.accept.successes,
                site.accept.point,
                site.accept.ci_low,
                site.accept.ci_high,
                site.pass.point,
                site.pass.ci_low,
                site.pass.ci_high,
                doc.bounds.azuma,
                doc.bounds.loss_tolerance,
            ));
        }
    }
    Ok(csv)
}
