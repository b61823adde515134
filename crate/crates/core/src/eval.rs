//! Batch evaluation: run the engine over a dataset, score predictions by
//! normalized exact match (or choice match) and token F1, and aggregate
//! accuracy, mean selected-chain coherence, refinement dynamics, latency,
//! and per-modality breakdowns into a persistable report.
//!
//! The coherence metric reported here is the mean of each run's selected
//! chain score — one concrete reading of a "reasoning path coherence
//! score", chosen because it is the quantity the refinement loop actually
//! optimizes and selects on.

use crate::backend::{make_backend, Backend, BackendKind, RoleTag, ScriptTable, ScriptedBackend};
use crate::chain::Modality;
use crate::dataset::{gold_chain, query_of, MdarRecord};
use crate::engine::{self, ConfigSnapshot, EngineConfig, TraceDocument};
use crate::rdu::render_subproblem_line;
use crate::text::{answers_match, token_f1};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Format tag written into every persisted report.
pub const REPORT_FORMAT: &str = "cmrf-report-v1";

/// Aggregates at one refinement cutoff: what accuracy and mean coherence
/// would have been had every run stopped after iteration `iteration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPoint {
    pub iteration: usize,
    pub accuracy: f64,
    pub coherence: f64,
}

/// Mean wall seconds and mean iteration count per completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_seconds: f64,
    pub mean_iterations: f64,
}

/// Per-modality slice of the headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
}

/// A run that died before producing a trace; counted incorrect at
/// coherence zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedRun {
    pub id: String,
    pub reason: String,
}

/// The full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config: ConfigSnapshot,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    /// Mean selected-chain coherence score; aborted runs contribute zero.
    pub coherence: f64,
    pub per_iteration: Vec<IterationPoint>,
    pub latency: LatencySummary,
    pub per_modality: BTreeMap<String, ModalityStats>,
    pub aborted: Vec<AbortedRun>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportFormatError {
    #[error("unreadable report: {0}")]
    Unreadable(String),
    #[error("invalid report: {0}")]
    Invalid(String),
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize") + "\n"
    }

    pub fn from_json(raw: &str) -> Result<Self, ReportFormatError> {
        let report: EvalReport =
            serde_json::from_str(raw).map_err(|e| ReportFormatError::Unreadable(e.to_string()))?;
        report.validate().map_err(ReportFormatError::Invalid)?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.format != REPORT_FORMAT {
            return Err(format!("unknown report format '{}'", self.format));
        }
        if self.n == 0 {
            return Err("report covers no records".to_string());
        }
        for (label, value) in [
            ("accuracy", self.accuracy),
            ("f1", self.f1),
            ("coherence", self.coherence),
        ] {
            check_fraction(label, value)?;
        }
        if self.per_iteration.len() != self.config.k_max + 1 {
            return Err(format!(
                "per-iteration series has {} points for a budget of {}",
                self.per_iteration.len(),
                self.config.k_max
            ));
        }
        for (idx, point) in self.per_iteration.iter().enumerate() {
            if point.iteration != idx {
                return Err(format!("per-iteration point {idx} labeled {}", point.iteration));
            }
            check_fraction("per-iteration accuracy", point.accuracy)?;
            check_fraction("per-iteration coherence", point.coherence)?;
        }
        for pair in self.per_iteration.windows(2) {
            if pair[1].coherence < pair[0].coherence {
                return Err("per-iteration coherence decreases, impossible under best-so-far".to_string());
            }
        }
        let mut modality_total = 0usize;
        for (label, stats) in &self.per_modality {
            check_fraction(&format!("{label} accuracy"), stats.accuracy)?;
            check_fraction(&format!("{label} f1"), stats.f1)?;
            modality_total += stats.n;
        }
        if modality_total != self.n {
            return Err(format!("modality slices cover {modality_total} of {} records", self.n));
        }
        if self.aborted.len() > self.n {
            return Err("more aborted runs than records".to_string());
        }
        if !self.latency.mean_seconds.is_finite() || self.latency.mean_seconds < 0.0 {
            return Err("negative or non-finite mean seconds".to_string());
        }
        if !self.latency.mean_iterations.is_finite()
            || self.latency.mean_iterations < 0.0
            || self.latency.mean_iterations > (self.config.k_max + 1) as f64
        {
            return Err("mean iterations outside the possible range".to_string());
        }
        Ok(())
    }
}

fn check_fraction(label: &str, value: f64) -> Result<(), String> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(format!("{label} {value} outside [0,1]"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// prediction scoring

/// Interprets a prediction as a choice letter ("B", "(b)", "C.") when the
/// record offers choices; returns the selected index.
pub fn map_choice(prediction: &str, choices: &[String]) -> Option<usize> {
    let cleaned = prediction
        .trim()
        .trim_start_matches('(')
        .trim_end_matches([')', '.', ':'])
        .trim();
    let mut chars = cleaned.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => {
            let idx = (c.to_ascii_uppercase() as u8 - b'A') as usize;
            (idx < choices.len()).then_some(idx)
        }
        _ => None,
    }
}

/// The text a prediction effectively claims: the mapped choice when it is a
/// recognizable letter, the prediction itself otherwise.
fn effective_prediction<'a>(prediction: &'a str, record: &'a MdarRecord) -> &'a str {
    match &record.choices {
        Some(choices) => map_choice(prediction, choices)
            .map(|i| choices[i].as_str())
            .unwrap_or(prediction),
        None => prediction,
    }
}

/// Exact match after normalization (lowercase, punctuation stripped,
/// articles dropped), with choice-letter mapping when the record is
/// multiple-choice.
pub fn prediction_correct(prediction: &str, record: &MdarRecord) -> bool {
    answers_match(effective_prediction(prediction, record), &record.answer)
}

/// Token-overlap F1 of the (choice-mapped) prediction vs the gold answer.
pub fn prediction_f1(prediction: &str, record: &MdarRecord) -> f64 {
    token_f1(effective_prediction(prediction, record), &record.answer)
}

/// Which modality bucket a record reports under: any cross-modal step makes
/// it cross-modal, otherwise any visual step makes it visual, otherwise
/// it is textual.
pub fn modality_label(record: &MdarRecord) -> &'static str {
    let mut saw_visual = false;
    for step in &record.steps {
        match step.modality {
            Modality::CrossModal => return "cross-modal",
            Modality::Visual => saw_visual = true,
            Modality::Textual => {}
        }
    }
    if saw_visual {
        "visual"
    } else {
        "textual"
    }
}

// ---------------------------------------------------------------------------
// refinement dynamics

/// Per-run series the dynamics report aggregates: the coherence score and
/// prediction correctness of each iteration's chain, in order. Empty for
/// aborted runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunDynamics {
    pub scores: Vec<f64>,
    pub correct: Vec<bool>,
}

impl RunDynamics {
    pub fn of(trace: &engine::RefinementTrace, record: &MdarRecord) -> Self {
        let scores = trace.scores();
        let correct = trace
            .iterations
            .iter()
            .map(|it| prediction_correct(&it.chain.final_answer, record))
            .collect();
        RunDynamics { scores, correct }
    }

    /// Score and correctness of the chain the engine would have selected
    /// with the budget cut to `k` refinements: best score among iterations
    /// `0..=k`, earliest on ties; runs that stopped earlier carry their
    /// final state forward; aborted runs count incorrect at zero.
    pub fn best_at_cutoff(&self, k: usize) -> (f64, bool) {
        if self.scores.is_empty() {
            return (0.0, false);
        }
        let upper = k.min(self.scores.len() - 1);
        let mut best = 0usize;
        for i in 1..=upper {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        (self.scores[best], self.correct[best])
    }
}

/// The iteration-dynamics series: one point per cutoff `0..=k_max`. The
/// coherence column is non-decreasing by construction (a running max per
/// run); the accuracy column usually is as well but may dip when a
/// higher-scoring yet wrong chain displaces a correct one.
pub fn dynamics_report(runs: &[RunDynamics], k_max: usize) -> Vec<IterationPoint> {
    assert!(!runs.is_empty(), "dynamics need at least one run");
    (0..=k_max)
        .map(|k| {
            let mut correct = 0usize;
            let mut coherence = 0.0;
            for run in runs {
                let (score, ok) = run.best_at_cutoff(k);
                coherence += score;
                if ok {
                    correct += 1;
                }
            }
            IterationPoint {
                iteration: k,
                accuracy: correct as f64 / runs.len() as f64,
                coherence: coherence / runs.len() as f64,
            }
        })
        .collect()
}

/// Arithmetic means over completed runs; zeros when nothing completed.
pub fn latency_report(seconds: &[f64], iteration_counts: &[usize]) -> LatencySummary {
    if seconds.is_empty() {
        return LatencySummary { mean_seconds: 0.0, mean_iterations: 0.0 };
    }
    debug_assert_eq!(seconds.len(), iteration_counts.len());
    LatencySummary {
        mean_seconds: seconds.iter().sum::<f64>() / seconds.len() as f64,
        mean_iterations: iteration_counts.iter().sum::<usize>() as f64
            / iteration_counts.len() as f64,
    }
}

// ---------------------------------------------------------------------------
// evaluation driver

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

/// A finished evaluation: the report plus the trace document of every
/// completed run, in dataset order.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub traces: Vec<TraceDocument>,
}

enum RecordOutcome {
    Completed {
        doc: TraceDocument,
        dynamics: RunDynamics,
        correct: bool,
        f1: f64,
        selected_score: f64,
        seconds: f64,
        iterations: usize,
    },
    Aborted {
        reason: String,
    },
}

/// A script that walks the engine straight through a record's annotated
/// gold chain: the decomposition echoes the gold sub-problems, inference
/// echoes the gold answers, and every verdict is a clean 10 — one
/// threshold-met iteration.
pub fn gold_echo_script(record: &MdarRecord) -> ScriptTable {
    let gold = gold_chain(record);
    let mut table = ScriptTable::new();
    let lines: Vec<String> =
        gold.steps.iter().map(|s| render_subproblem_line(&s.problem)).collect();
    table.push(RoleTag::Rdu, lines.join("\n"));
    for step in &gold.steps {
        table.push(RoleTag::Cie, step.answer.text.clone());
    }
    table.push(RoleTag::Cie, record.answer.clone());
    for _ in 0..=gold.steps.len() {
        table.push(RoleTag::Cam, "SCORE: 10\nFLAW: consistent");
    }
    table
}

/// Evaluates a dataset with the config's own backend. Scripted configs get
/// a fresh backend per record (the explicit script if one is present, the
/// record's gold-echo script otherwise) so results cannot depend on worker
/// interleaving; an HTTP backend is shared.
pub fn evaluate(
    records: &[MdarRecord],
    config: &EngineConfig,
    workers: usize,
) -> Result<EvalOutcome, EvalError> {
    match config.backend.kind {
        BackendKind::Scripted => match &config.backend.script {
            Some(table) if !table.is_empty() => {
                let table = table.clone();
                evaluate_with_provider(records, config, workers, move |_| {
                    Ok(Arc::new(ScriptedBackend::new(table.clone())) as Arc<dyn Backend>)
                })
            }
            _ => evaluate_with_provider(records, config, workers, |record| {
                Ok(Arc::new(ScriptedBackend::new(gold_echo_script(record))) as Arc<dyn Backend>)
            }),
        },
        BackendKind::Http => {
            let shared = make_backend(&config.backend).map_err(|e| EvalError::Config(e.to_string()))?;
            evaluate_with_provider(records, config, workers, move |_| Ok(shared.clone()))
        }
    }
}

/// [`evaluate`] with a caller-chosen backend per record. Records are
/// claimed by index across a bounded worker pool and results merged back
/// in dataset order, so the report is deterministic for deterministic
/// backends at any worker count.
pub fn evaluate_with_provider<F>(
    records: &[MdarRecord],
    config: &EngineConfig,
    workers: usize,
    provider: F,
) -> Result<EvalOutcome, EvalError>
where
    F: Fn(&MdarRecord) -> Result<Arc<dyn Backend>, String> + Sync,
{
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    config.validate().map_err(EvalError::Config)?;

    let workers = workers.clamp(1, records.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<RecordOutcome>>> =
        records.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                let outcome = run_record(&records[i], config, &provider);
                *slots[i].lock().expect("result slot") = Some(outcome);
            });
        }
    });

    let outcomes: Vec<RecordOutcome> = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every record claimed"))
        .collect();
    Ok(assemble(records, outcomes, config))
}

fn run_record<F>(record: &MdarRecord, config: &EngineConfig, provider: &F) -> RecordOutcome
where
    F: Fn(&MdarRecord) -> Result<Arc<dyn Backend>, String> + Sync,
{
    let backend = match provider(record) {
        Ok(b) => b,
        Err(reason) => return RecordOutcome::Aborted { reason },
    };
    let query = query_of(record);
    match engine::run_with_backend(&query, config, backend.as_ref()) {
        Ok(trace) => {
            let dynamics = RunDynamics::of(&trace, record);
            let prediction = trace.final_answer().to_string();
            let seconds = trace.iterations.iter().map(|it| it.seconds).sum();
            let iterations = trace.iterations.len();
            let selected_score = trace.selected_record().assessment.score;
            RecordOutcome::Completed {
                correct: prediction_correct(&prediction, record),
                f1: prediction_f1(&prediction, record),
                selected_score,
                seconds,
                iterations,
                dynamics,
                doc: TraceDocument::new(config, &query, trace),
            }
        }
        Err(e) => RecordOutcome::Aborted { reason: e.to_string() },
    }
}

fn assemble(records: &[MdarRecord], outcomes: Vec<RecordOutcome>, config: &EngineConfig) -> EvalOutcome {
    let n = records.len();
    let mut correct_count = 0usize;
    let mut f1_total = 0.0;
    let mut coherence_total = 0.0;
    let mut dynamics: Vec<RunDynamics> = Vec::with_capacity(n);
    let mut seconds: Vec<f64> = Vec::new();
    let mut iteration_counts: Vec<usize> = Vec::new();
    let mut aborted: Vec<AbortedRun> = Vec::new();
    let mut traces: Vec<TraceDocument> = Vec::new();
    let mut modality: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();

    for (record, outcome) in records.iter().zip(outcomes) {
        let bucket = modality.entry(modality_label(record).to_string()).or_insert((0, 0, 0.0));
        bucket.0 += 1;
        match outcome {
            RecordOutcome::Completed {
                doc,
                dynamics: run_dynamics,
                correct,
                f1,
                selected_score,
                seconds: run_seconds,
                iterations,
            } => {
                if correct {
                    correct_count += 1;
                    bucket.1 += 1;
                }
                f1_total += f1;
                bucket.2 += f1;
                coherence_total += selected_score;
                seconds.push(run_seconds);
                iteration_counts.push(iterations);
                dynamics.push(run_dynamics);
                traces.push(doc);
            }
            RecordOutcome::Aborted { reason } => {
                aborted.push(AbortedRun { id: record.id.clone(), reason });
                dynamics.push(RunDynamics::default());
            }
        }
    }

    let per_modality = modality
        .into_iter()
        .map(|(label, (count, correct, f1_sum))| {
            let stats = ModalityStats {
                n: count,
                accuracy: correct as f64 / count as f64,
                f1: f1_sum / count as f64,
            };
            (label, stats)
        })
        .collect();

    let report = EvalReport {
        format: REPORT_FORMAT.to_string(),
        config: ConfigSnapshot::of(config),
        n,
        accuracy: correct_count as f64 / n as f64,
        f1: f1_total / n as f64,
        coherence: coherence_total / n as f64,
        per_iteration: dynamics_report(&dynamics, config.k_max),
        latency: latency_report(&seconds, &iteration_counts),
        per_modality,
        aborted,
    };
    EvalOutcome { report, traces }
}
