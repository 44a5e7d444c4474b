//! The `fbcir` command line.
//!
//! Exit codes: 0 success, 2 input error, 3 backend error, 4 a result failed
//! its own invariant check.

pub mod bench;
mod check;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use bench::{BenchMode, BenchmarkFile, BenchmarkHeader};
pub use check::{golden_requests, protocol_check, CheckOutcome};

use crate::augment::{
    augment_corpus, AugmentPlan, GenerationClient, MockGenerationClient, RemoteGenerationClient,
    SourceTriplet,
};
use crate::error::Error;
use crate::metrics::{EvaluationReport, FocusReport, SampleEvaluation};
use crate::protocol::{serve, serve_tcp, ClientConfig, Endpoint, MockFault, MockServerConfig};
use crate::refinement::{predicted_inference_budget, refine, RefinementConfig};
use crate::scoring::{rank, RemoteScorer, ScoreRequest, Scorer, ToyScorer, ToyScorerParams, ValidityMode};
use crate::synthworld::{generate_world, sweep, TrainingConfig, World, WorldConfig};
use crate::types::{AugmentedSample, TokenSet};

#[derive(Debug, Parser)]
#[command(name = "fbcir", version, about = "Cross-modal focus diagnosis for composed image retrieval")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, env = "FBCIR_SEED", global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample work; output order always follows input order.
    #[arg(long, default_value_t = 1, global = true)]
    pub parallel: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find final pruning states and focus ratios for every sample.
    Refine(RefineArgs),
    /// Subset recall and aggregate focus imbalance.
    Evaluate(EvaluateArgs),
    /// Build hard-negative pools from source triplets.
    Augment(AugmentArgs),
    /// Train the toy scorer across negative ratios on the synthetic world.
    SynthDemo(SynthDemoArgs),
    /// Write a benchmark file sampled from the synthetic world.
    SynthWorld(SynthWorldArgs),
    /// Print the predicted worst-case number of validations.
    Bound(BoundArgs),
    /// Replay the golden scorer transcripts against an endpoint.
    ProtocolCheck(ProtocolCheckArgs),
    /// Serve the mock scorer and generation backend.
    MockServer(MockServerArgs),
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// `toy` or `remote:<endpoint>` with endpoint `tcp://host:port` or `exec:<command>`.
    #[arg(long, default_value = "toy")]
    pub scorer: String,
    /// Toy scorer parameters (JSON); identity projections when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Seconds to wait for each remote response.
    #[arg(long, default_value_t = 30)]
    pub timeout: u64,
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// `top1` or `full-order`.
    #[arg(long, default_value = "top1")]
    pub mode: ValidityMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Cutoffs for subset recall.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value = "top1")]
    pub mode: ValidityMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Source triplets, one JSON object per line.
    #[arg(long)]
    pub triplets: PathBuf,
    /// Augmentation plan (JSON); defaults when absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// `mock` or `remote:<endpoint>`.
    #[arg(long, default_value = "mock")]
    pub client: String,
    #[arg(long)]
    pub negative_ratio: Option<f64>,
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// World and training settings for the synthetic commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub world: WorldConfig,
    pub training: TrainingConfig,
}

#[derive(Debug, Args)]
pub struct SynthDemoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1.0")]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory for the per-ratio histories and the sweep summary.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthWorldArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub ni: usize,
    #[arg(long)]
    pub nt: usize,
    #[arg(long, default_value_t = 5)]
    pub w: usize,
}

#[derive(Debug, Args)]
pub struct ProtocolCheckArgs {
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value_t = 10)]
    pub timeout: u64,
    /// Also require the exact scores recorded from the mock backend.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct MockServerArgs {
    /// Listen on this address instead of serving standard input.
    #[arg(long)]
    pub tcp: Option<String>,
    /// `none`, `short`, `extra-line`, `nan` or `error`.
    #[arg(long, default_value = "none")]
    pub fault: MockFault,
    /// JSON object mapping candidate assets to fixed scores.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

/// A command failure tagged with its exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Backend(String),
    Invariant(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Backend(m) | Failure::Invariant(m) => m,
        }
    }

    fn from_error(e: Error, context: Option<&str>) -> Self {
        let msg = match context {
            Some(id) => format!("sample {id}: {e}"),
            None => e.to_string(),
        };
        match e {
            Error::Transport(_)
            | Error::ProtocolViolation(_)
            | Error::Framing(_)
            | Error::Timeout
            | Error::Remote { .. }
            | Error::GenerationFailed { .. }
            | Error::DivergedLoss { .. } => Failure::Backend(msg),
            Error::DegenerateState => Failure::Invariant(msg),
            _ => Failure::Input(msg),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from_error(e, None)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let parallel = cli.parallel.max(1);
    match cli.command {
        Command::Refine(a) => cmd_refine(a, parallel),
        Command::Evaluate(a) => cmd_evaluate(a, parallel),
        Command::Augment(a) => cmd_augment(a, cli.seed, parallel),
        Command::SynthDemo(a) => cmd_synth_demo(a, cli.seed),
        Command::SynthWorld(a) => cmd_synth_world(a, cli.seed),
        Command::Bound(a) => {
            println!("{}", predicted_inference_budget(a.ni, a.nt, a.w));
            Ok(())
        }
        Command::ProtocolCheck(a) => cmd_protocol_check(a),
        Command::MockServer(a) => cmd_mock_server(a, cli.seed.unwrap_or(0)),
    }
}

fn output(path: Option<&Path>) -> CmdResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            Failure::Input(format!("{}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_bench(path: &Path) -> CmdResult<BenchmarkFile> {
    BenchmarkFile::read_path(path).map_err(|e| Failure::Input(e.to_string()))
}

fn build_scorer(args: &ScorerArgs, bench: &BenchmarkFile, parallel: usize) -> CmdResult<Box<dyn Scorer>> {
    if let Some(endpoint) = args.scorer.strip_prefix("remote:") {
        if bench.mode != BenchMode::Asset {
            return Err(Failure::Input("remote scoring needs an asset-mode benchmark".into()));
        }
        let endpoint = Endpoint::parse(endpoint).map_err(|e| Failure::Input(e.to_string()))?;
        let config = ClientConfig {
            retries: args.retries,
            timeout: Duration::from_secs(args.timeout),
            connections: parallel,
        };
        return Ok(Box::new(RemoteScorer::new(endpoint, config)));
    }
    if args.scorer != "toy" {
        return Err(Failure::Input(format!("unknown scorer {:?}", args.scorer)));
    }
    if bench.mode != BenchMode::Inline {
        return Err(Failure::Input("the toy scorer needs an inline-mode benchmark".into()));
    }
    let params = match &args.params {
        Some(p) => read_json::<ToyScorerParams>(p)?,
        None => {
            let dim = bench
                .samples
                .first()
                .and_then(|s| s.candidates.first())
                .and_then(|c| c.features())
                .map_or(2, <[f64]>::len);
            ToyScorerParams::identity(dim)
        }
    };
    Ok(Box::new(ToyScorer::new(params)?))
}

/// Runs `work` on every sample and hands results to `sink` in input order.
///
/// Samples are processed in parallel chunks; a failure stops the run after
/// every earlier sample has been emitted.
fn for_each_sample<T, F, S>(samples: &[AugmentedSample], parallel: usize, work: F, mut sink: S) -> CmdResult
where
    T: Send,
    F: Fn(&AugmentedSample) -> CmdResult<T> + Sync,
    S: FnMut(T) -> CmdResult,
{
    use rayon::prelude::*;
    if parallel <= 1 {
        for s in samples {
            sink(work(s)?)?;
        }
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Failure::Input(e.to_string()))?;
    for chunk in samples.chunks(parallel * 4) {
        let results: Vec<CmdResult<T>> = pool.install(|| chunk.par_iter().map(&work).collect());
        for r in results {
            sink(r?)?;
        }
    }
    Ok(())
}

fn focus_for(
    sample: &AugmentedSample,
    scorer: &dyn Scorer,
    config: &RefinementConfig,
) -> CmdResult<FocusReport> {
    let id = sample.sample_id.as_str();
    let refinement = refine(id, &sample.query, &sample.candidates, scorer, config)
        .map_err(|e| Failure::from_error(e, Some(id)))?;
    FocusReport::from_refinement(id, &sample.query, &refinement)
        .map_err(|e| Failure::from_error(e, Some(id)))
}

fn cmd_refine(args: RefineArgs, parallel: usize) -> CmdResult {
    let bench = load_bench(&args.input)?;
    let scorer = build_scorer(&args.scorer, &bench, parallel)?;
    let config = RefinementConfig {
        beam_width: args.beam,
        mode: args.mode,
        ..Default::default()
    };
    config.validate()?;
    let mut out = output(args.out.as_deref())?;
    let mut violations = Vec::new();
    let result = for_each_sample(
        &bench.samples,
        parallel,
        |s| focus_for(s, scorer.as_ref(), &config),
        |report| {
            if let Err(msg) = report.self_check() {
                violations.push(format!("sample {}: {msg}", report.sample_id));
            }
            serde_json::to_writer(&mut out, &report).map_err(Error::from)?;
            out.write_all(b"\n")?;
            out.flush()?;
            Ok(())
        },
    );
    out.flush()?;
    result?;
    if let Some(first) = violations.first() {
        return Err(Failure::Invariant(first.clone()));
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, parallel: usize) -> CmdResult {
    let bench = load_bench(&args.input)?;
    let scorer = build_scorer(&args.scorer, &bench, parallel)?;
    let config = RefinementConfig {
        beam_width: args.beam,
        mode: args.mode,
        ..Default::default()
    };
    config.validate()?;
    if args.k.contains(&0) {
        return Err(Failure::Input("k must be at least 1".into()));
    }
    let mut evaluations = Vec::with_capacity(bench.samples.len());
    for_each_sample(
        &bench.samples,
        parallel,
        |s| {
            let id = s.sample_id.as_str();
            let full = TokenSet::full(s.query.n_total());
            let ranking = rank(scorer.as_ref(), &ScoreRequest::new(id, &s.query, &full, &s.candidates))
                .map_err(|e| Failure::from_error(e, Some(id)))?;
            let positive = s.positive().map_err(|e| Failure::from_error(e, Some(id)))?;
            let positive_rank = ranking.rank_of(positive.id).expect("positive is in the pool");
            Ok(SampleEvaluation {
                sample_id: id.to_string(),
                positive_rank,
                focus: focus_for(s, scorer.as_ref(), &config)?,
            })
        },
        |e| {
            evaluations.push(e);
            Ok(())
        },
    )?;
    let report = EvaluationReport::build(evaluations, &args.k);
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    if let Some(bad) = report
        .samples
        .iter()
        .find_map(|s| s.focus.self_check().err().map(|m| format!("sample {}: {m}", s.sample_id)))
    {
        return Err(Failure::Invariant(bad));
    }
    Ok(())
}

fn read_triplets(path: &Path) -> CmdResult<Vec<SourceTriplet>> {
    let file = File::open(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: SourceTriplet = serde_json::from_str(&line)
            .map_err(|e| Failure::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

fn cmd_augment(args: AugmentArgs, seed: Option<u64>, parallel: usize) -> CmdResult {
    let triplets = read_triplets(&args.triplets)?;
    let mut plan = match &args.plan {
        Some(p) => read_json::<AugmentPlan>(p)?,
        None => AugmentPlan::default(),
    };
    if let Some(s) = seed {
        plan.seed = s;
    }
    if let Some(r) = args.negative_ratio {
        plan.negative_ratio = r;
    }
    plan.validate()?;
    let client: Box<dyn GenerationClient> = if args.client == "mock" {
        Box::new(MockGenerationClient::new(plan.seed))
    } else if let Some(ep) = args.client.strip_prefix("remote:") {
        let endpoint = Endpoint::parse(ep).map_err(|e| Failure::Input(e.to_string()))?;
        Box::new(RemoteGenerationClient::new(
            endpoint,
            ClientConfig {
                timeout: Duration::from_secs(args.timeout),
                connections: parallel,
                ..Default::default()
            },
        ))
    } else {
        return Err(Failure::Input(format!("unknown client {:?}", args.client)));
    };
    let samples = augment_corpus(&triplets, &plan, client.as_ref(), parallel)?;
    let file = BenchmarkFile::new(BenchMode::Asset, samples)
        .map_err(|e| Failure::Invariant(e.to_string()))?;
    let out = output(args.out.as_deref())?;
    file.write(out)?;
    Ok(())
}

fn synth_config(path: Option<&Path>, seed: Option<u64>) -> CmdResult<SynthConfig> {
    let mut config = match path {
        Some(p) => read_json::<SynthConfig>(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        config.world.seed = s;
        config.training.seed = s;
    }
    Ok(config)
}

/// Final metrics of one ratio in the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub negative_ratio: f64,
    pub steps: usize,
    pub loss: f64,
    pub rs_at_1: f64,
    pub imbalance: f64,
    pub history: String,
}

fn cmd_synth_demo(args: SynthDemoArgs, seed: Option<u64>) -> CmdResult {
    let mut config = synth_config(args.config.as_deref(), seed)?;
    if let Some(steps) = args.steps {
        config.training.steps = steps;
    }
    if args.ratios.is_empty() {
        return Err(Failure::Input("no ratios given".into()));
    }
    let world = World::new(config.world.clone())?;
    let entries = sweep(&world, &config.training, &args.ratios)?;
    fs::create_dir_all(&args.out)?;
    let mut summary = Vec::new();
    for entry in &entries {
        let name = format!("history-ratio-{}.jsonl", entry.negative_ratio);
        let mut w = BufWriter::new(File::create(args.out.join(&name))?);
        for record in &entry.outcome.history {
            serde_json::to_writer(&mut w, record).map_err(Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let last = entry.final_record();
        println!(
            "ratio {:<5} rs@1 {:.4} imbalance {:.4} loss {:.4}",
            entry.negative_ratio, last.rs_at_1, last.imbalance, last.loss
        );
        summary.push(SweepSummary {
            negative_ratio: entry.negative_ratio,
            steps: last.step,
            loss: last.loss,
            rs_at_1: last.rs_at_1,
            imbalance: last.imbalance,
            history: name,
        });
    }
    let mut w = BufWriter::new(File::create(args.out.join("sweep.json"))?);
    serde_json::to_writer_pretty(&mut w, &summary).map_err(Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_synth_world(args: SynthWorldArgs, seed: Option<u64>) -> CmdResult {
    let config = synth_config(args.config.as_deref(), seed)?;
    let samples = generate_world(&config.world, args.count)?;
    let file = BenchmarkFile::new(BenchMode::Inline, samples).map_err(|e| Failure::Invariant(e.to_string()))?;
    file.write(output(args.out.as_deref())?)?;
    Ok(())
}

fn cmd_protocol_check(args: ProtocolCheckArgs) -> CmdResult {
    let endpoint = Endpoint::parse(&args.endpoint).map_err(|e| Failure::Input(e.to_string()))?;
    let outcome = protocol_check(&endpoint, Duration::from_secs(args.timeout), args.strict);
    for line in &outcome.lines {
        println!("{line}");
    }
    match outcome.failure {
        None => {
            println!("PASS");
            Ok(())
        }
        Some(e) => {
            println!("FAIL");
            Err(Failure::Backend(e.to_string()))
        }
    }
}

fn cmd_mock_server(args: MockServerArgs, seed: u64) -> CmdResult {
    let table = match &args.table {
        Some(p) => read_json(p)?,
        None => Default::default(),
    };
    let config = MockServerConfig {
        fault: args.fault,
        table,
        seed,
    };
    match &args.tcp {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(listener, config)?;
        }
        None => {
            let stdin = io::stdin();
            serve(stdin.lock(), io::stdout().lock(), &config)?;
        }
    }
    Ok(())
}
