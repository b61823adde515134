//! `cmrf` — command-line front end for the refinement engine.
//!
//! Four commands: `ask` runs one query through the decompose/answer/judge
//! loop, `eval` scores a whole JSONL dataset into a report, `train-cam`
//! fits the feature-based coherence scorer on annotated chain pairs, and
//! `replay` re-runs a recorded session without touching the network.
//!
//! Exit codes: 0 success, 1 run failure, 2 bad input. The API key is only
//! ever read from `CMRF_API_KEY`; `CMRF_BASE_URL` supplies the endpoint
//! when neither flag nor config names one.

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmrf_core::backend::{
    make_backend, BackendConfig, BackendKind, RecordingBackend, ReplayBackend, ScriptTable,
};
use cmrf_core::cam::{train_cam, CamScorerParams, FeaturizedPair, TrainHyper};
use cmrf_core::chain::{MultimodalQuery, DEFAULT_MAX_SUBPROBLEMS};
use cmrf_core::dataset::{contrastive_pairs, load_mdar, MdarLoad};
use cmrf_core::engine::{
    run, run_with_backend, EngineConfig, RefinementTrace, Termination, TraceDocument,
    DEFAULT_K_MAX, DEFAULT_SEED, DEFAULT_TAU,
};
use cmrf_core::eval::evaluate;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const API_KEY_VAR: &str = "CMRF_API_KEY";
const BASE_URL_VAR: &str = "CMRF_BASE_URL";

#[derive(Parser)]
#[command(name = "cmrf", version, about = "Iterative multimodal reasoning over sub-problem chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question through the full refinement loop.
    Ask(AskArgs),
    /// Run the engine over a JSONL dataset and write a metrics report.
    Eval(EvalArgs),
    /// Fit the contrastive coherence scorer on annotated chain pairs.
    TrainCam(TrainCamArgs),
    /// Re-run a recorded session from its transcript, offline.
    Replay(ReplayArgs),
}

/// Loop knobs shared by `ask` and `replay`.
#[derive(Args)]
struct LoopFlags {
    /// Confidence threshold that stops refinement early.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Maximum number of refinement iterations after the initial pass.
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    k_max: usize,
    /// Cap on sub-problems per decomposition.
    #[arg(long, default_value_t = DEFAULT_MAX_SUBPROBLEMS)]
    n_max: usize,
    /// Sampling seed forwarded to the backend.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl LoopFlags {
    fn apply(&self, config: &mut EngineConfig) {
        config.tau = self.tau;
        config.k_max = self.k_max;
        config.n_max = self.n_max;
        config.seed = self.seed;
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Scripted,
    Http,
}

#[derive(Args)]
struct AskArgs {
    /// The question to answer.
    #[arg(long)]
    question: String,
    /// Image path or URL the question refers to.
    #[arg(long)]
    image: Option<String>,
    /// Identifier stamped into the trace.
    #[arg(long, default_value = "cli")]
    id: String,
    #[command(flatten)]
    knobs: LoopFlags,
    /// Which model backend answers the prompts.
    #[arg(long, value_enum, default_value_t = BackendChoice::Scripted)]
    backend: BackendChoice,
    /// Scripted-backend reply table (JSON with rdu/cie/cam arrays).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Chat-completions endpoint; defaults to $CMRF_BASE_URL.
    #[arg(long)]
    base_url: Option<String>,
    /// Model name sent to an HTTP endpoint.
    #[arg(long, default_value = "local-model")]
    model: String,
    /// Write the full refinement trace here as JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Record every model exchange to this JSONL transcript.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL dataset of annotated records.
    #[arg(long)]
    dataset: PathBuf,
    /// Engine configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Where to write the metrics report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Parallel runs (each run stays internally sequential).
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Also write one refinement trace per record into this directory.
    #[arg(long)]
    traces_dir: Option<PathBuf>,
    /// Reject the whole dataset on the first malformed line.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct TrainCamArgs {
    /// JSONL dataset whose records carry erroneous chains.
    #[arg(long)]
    dataset: PathBuf,
    /// Where to write the fitted scorer parameters.
    #[arg(long)]
    out: PathBuf,
    /// Ranking margin the correct chain must win by.
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    /// Gradient-descent learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Maximum training epochs.
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    /// Seed for the initial parameter draw.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Sub-problem cap used to normalize the chain-length feature.
    #[arg(long, default_value_t = DEFAULT_MAX_SUBPROBLEMS)]
    n_max: usize,
    /// Reject the whole dataset on the first malformed line.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Transcript captured with `ask --record`.
    #[arg(long)]
    transcript: PathBuf,
    /// The question to answer (must match the recorded session's calls).
    #[arg(long)]
    question: String,
    /// Image path or URL the question refers to.
    #[arg(long)]
    image: Option<String>,
    /// Identifier stamped into the trace.
    #[arg(long, default_value = "replay")]
    id: String,
    #[command(flatten)]
    knobs: LoopFlags,
    /// Write the full refinement trace here as JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

/// Failures split by whose fault they are: bad input exits 2, a run that
/// went wrong exits 1.
enum CliError {
    BadInput(String),
    Run(String),
}

impl CliError {
    fn bad(msg: impl Into<String>) -> Self {
        CliError::BadInput(msg.into())
    }

    fn run(msg: impl Into<String>) -> Self {
        CliError::Run(msg.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ask(args) => cmd_ask(args),
        Command::Eval(args) => cmd_eval(args),
        Command::TrainCam(args) => cmd_train_cam(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::BadInput(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// ask

fn cmd_ask(args: AskArgs) -> Result<(), CliError> {
    let backend_config = match args.backend {
        BackendChoice::Scripted => {
            let script_path = args.script.as_ref().ok_or_else(|| {
                CliError::bad("the scripted backend needs --script with a reply table")
            })?;
            let raw = read_text(script_path)?;
            let table = ScriptTable::from_json(&raw)
                .map_err(|e| CliError::bad(format!("{}: {e}", script_path.display())))?;
            BackendConfig::scripted(table)
        }
        BackendChoice::Http => {
            let base_url = args
                .base_url
                .clone()
                .or_else(|| std::env::var(BASE_URL_VAR).ok())
                .ok_or_else(|| {
                    CliError::bad(format!("the http backend needs --base-url or ${BASE_URL_VAR}"))
                })?;
            let mut bc = BackendConfig::http(base_url, &args.model);
            bc.api_key = std::env::var(API_KEY_VAR).ok();
            bc
        }
    };

    let mut config = EngineConfig::new(backend_config);
    args.knobs.apply(&mut config);
    config.validate().map_err(CliError::bad)?;

    let query = MultimodalQuery::new(&args.id, args.image.clone(), &args.question);
    let trace = match &args.record {
        Some(path) => {
            let live = make_backend(&config.backend).map_err(|e| CliError::bad(e.to_string()))?;
            let recording = RecordingBackend::create(live, path)
                .map_err(|e| CliError::run(format!("{}: {e}", path.display())))?;
            run_with_backend(&query, &config, &recording)
        }
        None => run(&query, &config),
    }
    .map_err(|e| CliError::run(e.to_string()))?;

    report_trace(&trace);
    if let Some(path) = &args.trace_out {
        write_text(path, &TraceDocument::new(&config, &query, trace.clone()).to_json_pretty())?;
        eprintln!("trace written to {}", path.display());
    }
    println!("{}", trace.final_answer());
    Ok(())
}

/// One-line run summary on stderr, keeping stdout for the answer alone.
fn report_trace(trace: &RefinementTrace) {
    let termination = match trace.termination {
        Termination::ThresholdMet => "threshold met",
        Termination::KMaxExhausted => "budget exhausted",
    };
    let scores: Vec<String> =
        trace.scores().iter().map(|s| format!("{s:.2}")).collect();
    eprintln!(
        "{} after {} iteration(s) [{}]; selected iteration {} at score {:.4}",
        termination,
        trace.iterations.len(),
        scores.join(" -> "),
        trace.selected,
        trace.selected_record().assessment.score,
    );
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let raw = read_text(&args.config)?;
    let mut config: EngineConfig = serde_json::from_str(&raw)
        .map_err(|e| CliError::bad(format!("{}: {e}", args.config.display())))?;
    apply_env(&mut config.backend);
    // a scripted eval config without a reply table means gold-echo mode:
    // each record is answered from its own annotation
    if config.backend.kind == BackendKind::Scripted && config.backend.script.is_none() {
        config.backend.script = Some(ScriptTable::new());
    }
    config.validate().map_err(CliError::bad)?;

    let records = load_records(&args.dataset, args.strict)?;
    let outcome = evaluate(&records, &config, args.workers)
        .map_err(|e| CliError::bad(e.to_string()))?;

    write_text(&args.report, &outcome.report.to_json_pretty())?;
    if let Some(dir) = &args.traces_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::run(format!("{}: {e}", dir.display())))?;
        for doc in &outcome.traces {
            write_text(&dir.join(format!("{}.json", doc.query.id)), &doc.to_json_pretty())?;
        }
        eprintln!("{} traces written to {}", outcome.traces.len(), dir.display());
    }

    let r = &outcome.report;
    println!(
        "evaluated {} records: accuracy {:.3}, f1 {:.3}, coherence {:.3}, \
         mean iterations {:.2}, aborted {}",
        r.n,
        r.accuracy,
        r.f1,
        r.coherence,
        r.latency.mean_iterations,
        r.aborted.len(),
    );
    eprintln!("report written to {}", args.report.display());
    Ok(())
}

/// Env fallbacks for the fields an http config file leaves empty.
fn apply_env(backend: &mut BackendConfig) {
    if backend.kind == BackendKind::Http {
        if backend.api_key.is_none() {
            backend.api_key = std::env::var(API_KEY_VAR).ok();
        }
        if backend.base_url.is_none() {
            backend.base_url = std::env::var(BASE_URL_VAR).ok();
        }
    }
}

// ---------------------------------------------------------------------------
// train-cam

fn cmd_train_cam(args: TrainCamArgs) -> Result<(), CliError> {
    if !(args.margin.is_finite() && args.margin > 0.0) {
        return Err(CliError::bad(format!("margin must be positive, got {}", args.margin)));
    }
    let records = load_records(&args.dataset, args.strict)?;

    let mut pairs: Vec<FeaturizedPair> = Vec::new();
    for record in &records {
        let record_pairs = contrastive_pairs(record)
            .map_err(|e| CliError::bad(format!("record {}: {e}", record.id)))?;
        for pair in record_pairs {
            pairs.push(
                pair.featurize(args.n_max)
                    .map_err(|e| CliError::bad(format!("record {}: {e}", record.id)))?,
            );
        }
    }
    if pairs.is_empty() {
        return Err(CliError::bad(
            "no training pairs: the dataset carries no erroneous chains".to_string(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let weights: Vec<f64> =
        (0..cmrf_core::cam::FEATURE_DIM).map(|_| rng.random_range(-0.01..0.01)).collect();
    let bias = rng.random_range(-0.01..0.01);
    let init = CamScorerParams::new(weights, bias, args.margin)
        .map_err(|e| CliError::bad(e.to_string()))?;

    let hyper = TrainHyper { learning_rate: args.lr, epochs: args.epochs };
    let outcome =
        train_cam(&pairs, &init, hyper).map_err(|e| CliError::run(e.to_string()))?;
    let accuracy = cmrf_core::cam::ranking_accuracy(&outcome.params, &pairs)
        .map_err(|e| CliError::run(e.to_string()))?;

    outcome
        .params
        .save(&args.out)
        .map_err(|e| CliError::run(format!("{}: {e}", args.out.display())))?;

    println!(
        "trained on {} pairs: loss {:.6} -> {:.6} over {} epochs, ranking accuracy {:.3}",
        pairs.len(),
        outcome.initial_loss,
        outcome.final_loss,
        outcome.epochs_run,
        accuracy,
    );
    eprintln!("scorer parameters written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// replay

fn cmd_replay(args: ReplayArgs) -> Result<(), CliError> {
    let backend = ReplayBackend::load(&args.transcript)
        .map_err(|e| CliError::bad(format!("{}: {e}", args.transcript.display())))?;

    let mut config = EngineConfig::new(BackendConfig::scripted(ScriptTable::new()));
    args.knobs.apply(&mut config);
    config.validate().map_err(CliError::bad)?;

    let query = MultimodalQuery::new(&args.id, args.image.clone(), &args.question);
    let trace = run_with_backend(&query, &config, &backend)
        .map_err(|e| CliError::run(format!("replay diverged: {e}")))?;

    report_trace(&trace);
    if let Some(path) = &args.trace_out {
        write_text(path, &TraceDocument::new(&config, &query, trace.clone()).to_json_pretty())?;
        eprintln!("trace written to {}", path.display());
    }
    println!("{}", trace.final_answer());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers

fn load_records(path: &Path, strict: bool) -> Result<Vec<cmrf_core::dataset::MdarRecord>, CliError> {
    let MdarLoad { records, rejected } =
        load_mdar(path, strict).map_err(|e| CliError::bad(e.to_string()))?;
    for reject in &rejected {
        eprintln!("warning: {} line {}: {}", path.display(), reject.line, reject.reason);
    }
    if records.is_empty() {
        return Err(CliError::bad(format!("{}: no usable records", path.display())));
    }
    Ok(records)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::bad(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::run(format!("{}: {e}", path.display())))
}
