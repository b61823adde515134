//! The refinement loop: decompose, answer, assess, and — while the
//! coherence score stays under the acceptance threshold — route the
//! assessor's feedback back to whichever stage it blames, up to a fixed
//! iteration budget. The best-scoring chain across all iterations is the
//! one that answers, not necessarily the last.

use crate::backend::{make_backend, Backend, BackendConfig, BackendKind, Sampling};
use crate::cam::{self, CamError, CamScorerParams};
use crate::chain::{
    validate_chain, ChainAssessment, ChainStep, FlawClass, MultimodalQuery, ReasoningChain,
    SubProblem, DEFAULT_MAX_SUBPROBLEMS,
};
use crate::cie::{self, CieError, ContextBudget};
use crate::prompts;
use crate::rdu::{self, DecompositionFeedback, RduError};
use serde::{Deserialize, Serialize};

/// Format tag written into every persisted trace document.
pub const TRACE_FORMAT: &str = "cmrf-trace-v1";

pub const DEFAULT_TAU: f64 = 0.85;
pub const DEFAULT_K_MAX: usize = 3;
pub const DEFAULT_SEED: u64 = 42;

/// Which scorer decides the chain-level coherence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamMode {
    /// Mean of the prompted step/final verdicts.
    #[default]
    Prompted,
    /// Logistic surrogate over chain features (verdicts still drive routing).
    Trained,
    /// Average of the two.
    MeanOfBoth,
}

/// Engine settings. `tau` is the acceptance threshold, `k_max` the number
/// of refinement iterations allowed after the initial pass, `n_max` the
/// decomposition size cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub cam_mode: CamMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub backend: BackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<CamScorerParams>,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_k_max() -> usize {
    DEFAULT_K_MAX
}

fn default_n_max() -> usize {
    DEFAULT_MAX_SUBPROBLEMS
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl EngineConfig {
    pub fn new(backend: BackendConfig) -> Self {
        EngineConfig {
            tau: DEFAULT_TAU,
            k_max: DEFAULT_K_MAX,
            n_max: DEFAULT_MAX_SUBPROBLEMS,
            cam_mode: CamMode::default(),
            seed: DEFAULT_SEED,
            backend,
            scorer: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.tau.is_finite() || self.tau <= 0.0 || self.tau > 1.0 {
            return Err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.n_max == 0 {
            return Err("n_max must be at least 1".to_string());
        }
        if self.cam_mode != CamMode::Prompted && self.scorer.is_none() {
            return Err(format!(
                "cam mode {} needs trained scorer parameters",
                serde_json::to_string(&self.cam_mode).expect("mode tag").trim_matches('"')
            ));
        }
        self.backend.validate().map_err(|e| e.to_string())
    }

    fn sampling(&self) -> Sampling {
        Sampling { temperature: 0.0, max_tokens: 512, seed: Some(self.seed) }
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// The latest score reached the threshold.
    ThresholdMet,
    /// The iteration budget ran out with the score still short.
    KMaxExhausted,
}

/// What produced an iteration's chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionTaken {
    /// First decomposition and full pass.
    Initial,
    /// Fresh decomposition requested because step `from_step` attacked the
    /// query wrongly.
    Redecomposed { from_step: usize },
    /// Steps from `step` onward re-answered with an alternative take.
    Reinferred { step: usize },
}

/// One loop iteration: the chain it produced, how it was judged, and what
/// was done to get it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub action: ActionTaken,
    pub chain: ReasoningChain,
    pub assessment: ChainAssessment,
    /// Wall seconds of backend work attributed to this iteration.
    pub seconds: f64,
    pub template_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Result of a full engine run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<IterationRecord>,
    /// Index of the answering iteration: the highest score, earliest on ties.
    pub selected: usize,
    pub termination: Termination,
}

impl RefinementTrace {
    pub fn selected_record(&self) -> &IterationRecord {
        &self.iterations[self.selected]
    }

    pub fn final_answer(&self) -> &str {
        &self.selected_record().chain.final_answer
    }

    pub fn scores(&self) -> Vec<f64> {
        self.iterations.iter().map(|it| it.assessment.score).collect()
    }
}

/// Where the assessor's feedback routes the next iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision {
    Redecompose { from_step: usize },
    Reinfer { step: usize },
}

/// Routing rule: a decomposition flaw at the weakest step sends the loop
/// back to decomposition; any other flaw — or a merely low-scoring chain
/// with every step nominally consistent — re-runs inference from the
/// weakest step.
pub fn route_feedback(assessment: &ChainAssessment) -> RouteDecision {
    let step = assessment.flaw_step.unwrap_or_else(|| assessment.weakest_step());
    match assessment.step_verdicts[step - 1].flaw {
        FlawClass::DecompositionFlaw => RouteDecision::Redecompose { from_step: step },
        _ => RouteDecision::Reinfer { step },
    }
}

/// Loop guard, threshold checked first: a score at or above `tau` stops
/// with [`Termination::ThresholdMet`] even on the budget's last iteration;
/// otherwise `completed` refinements at `k_max` stops with
/// [`Termination::KMaxExhausted`].
pub fn should_terminate(score: f64, completed: usize, tau: f64, k_max: usize) -> Option<Termination> {
    if score >= tau {
        Some(Termination::ThresholdMet)
    } else if completed >= k_max {
        Some(Termination::KMaxExhausted)
    } else {
        None
    }
}

/// Index of the best iteration: maximum score, earliest on ties.
pub fn select_best(iterations: &[IterationRecord]) -> usize {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, it) in iterations.iter().enumerate() {
        if it.assessment.score > best_score {
            best_score = it.assessment.score;
            best = i;
        }
    }
    best
}

#[derive(Debug, thiserror::Error)]
pub enum EngineFailure {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("decomposition failed: {0}")]
    Rdu(#[from] RduError),
    #[error("inference failed: {0}")]
    Cie(#[from] CieError),
    #[error("assessment failed: {0}")]
    Cam(#[from] CamError),
}

/// An aborted run: the cause plus every iteration that completed before it.
#[derive(Debug)]
pub struct EngineError {
    pub failure: EngineFailure,
    pub partial: Vec<IterationRecord>,
}

impl std::fmt::Display for EngineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} completed iteration(s)", self.failure, self.partial.len())
    }
}

impl std::error::Error for EngineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.failure)
    }
}

/// Builds the configured backend and runs the loop.
pub fn run(query: &MultimodalQuery, config: &EngineConfig) -> Result<RefinementTrace, EngineError> {
    config
        .validate()
        .map_err(|e| EngineError { failure: EngineFailure::Config(e), partial: Vec::new() })?;
    let backend = make_backend(&config.backend).map_err(|e| EngineError {
        failure: EngineFailure::Config(e.to_string()),
        partial: Vec::new(),
    })?;
    run_with_backend(query, config, backend.as_ref())
}

/// Runs the loop against a caller-supplied backend (the config's backend
/// section is then metadata only).
pub fn run_with_backend(
    query: &MultimodalQuery,
    config: &EngineConfig,
    backend: &dyn Backend,
) -> Result<RefinementTrace, EngineError> {
    let mut iterations = Vec::new();
    match drive(query, config, backend, &mut iterations) {
        Ok(termination) => {
            let selected = select_best(&iterations);
            Ok(RefinementTrace { iterations, selected, termination })
        }
        Err(failure) => Err(EngineError { failure, partial: iterations }),
    }
}

fn drive(
    query: &MultimodalQuery,
    config: &EngineConfig,
    backend: &dyn Backend,
    iterations: &mut Vec<IterationRecord>,
) -> Result<Termination, EngineFailure> {
    config.validate().map_err(EngineFailure::Config)?;
    let sampling = config.sampling();
    let budget = ContextBudget::default();

    let initial = rdu::decompose(backend, query, None, config.n_max, sampling)?;
    let mut subproblems = initial.subproblems;
    let run = cie::run_chain(backend, query, &subproblems, 0, sampling, budget)?;
    iterations.push(build_record(
        backend,
        query,
        config,
        sampling,
        budget,
        run,
        ActionTaken::Initial,
        initial.seconds,
        owned(&initial.template_ids),
        initial.warnings,
    )?);

    let mut completed = 0usize;
    loop {
        let last = iterations.last().expect("loop starts with one iteration");
        if let Some(termination) =
            should_terminate(last.assessment.score, completed, config.tau, config.k_max)
        {
            return Ok(termination);
        }
        completed += 1;

        let (run, action, extra_seconds, extra_ids, extra_warnings) =
            match route_feedback(&last.assessment) {
                RouteDecision::Reinfer { step } => {
                    let prefix: Vec<ChainStep> = last.chain.steps[..step - 1].to_vec();
                    let run = cie::run_chain_from(
                        backend,
                        query,
                        &subproblems,
                        prefix,
                        step,
                        Some(step),
                        completed,
                        sampling,
                        budget,
                    )?;
                    (run, ActionTaken::Reinferred { step }, 0.0, Vec::new(), Vec::new())
                }
                RouteDecision::Redecompose { from_step } => {
                    let feedback = DecompositionFeedback::new(
                        subproblems.clone(),
                        last.assessment.feedback.clone(),
                        from_step,
                    )?;
                    let decomp =
                        rdu::decompose(backend, query, Some(&feedback), config.n_max, sampling)?;
                    let keep = reuse_len(&subproblems, &decomp.subproblems, from_step);
                    let prefix: Vec<ChainStep> = last.chain.steps[..keep].to_vec();
                    let run = cie::run_chain_from(
                        backend,
                        query,
                        &decomp.subproblems,
                        prefix,
                        keep + 1,
                        None,
                        completed,
                        sampling,
                        budget,
                    )?;
                    subproblems = decomp.subproblems;
                    (
                        run,
                        ActionTaken::Redecomposed { from_step },
                        decomp.seconds,
                        owned(&decomp.template_ids),
                        decomp.warnings,
                    )
                }
            };

        let record = build_record(
            backend,
            query,
            config,
            sampling,
            budget,
            run,
            action,
            extra_seconds,
            extra_ids,
            extra_warnings,
        )?;
        iterations.push(record);
    }
}

/// How many leading steps of the previous decomposition survive into the
/// revised one: the common prefix, never reaching the flawed step.
fn reuse_len(old: &[SubProblem], new: &[SubProblem], flaw_step: usize) -> usize {
    let cap = flaw_step.saturating_sub(1).min(old.len()).min(new.len());
    let mut keep = 0;
    while keep < cap && old[keep] == new[keep] {
        keep += 1;
    }
    keep
}

#[allow(clippy::too_many_arguments)]
fn build_record(
    backend: &dyn Backend,
    query: &MultimodalQuery,
    config: &EngineConfig,
    sampling: Sampling,
    budget: ContextBudget,
    run: cie::ChainRun,
    action: ActionTaken,
    extra_seconds: f64,
    extra_ids: Vec<String>,
    extra_warnings: Vec<String>,
) -> Result<IterationRecord, EngineFailure> {
    let assess = cam::assess(backend, query, &run.chain, sampling, budget)?;
    let assessment = moderated(config, query, &run.chain, assess.assessment)?;

    let mut template_ids = extra_ids;
    for id in run.template_ids.iter().chain(assess.template_ids.iter()) {
        if !template_ids.iter().any(|t| t == id) {
            template_ids.push((*id).to_string());
        }
    }
    let mut warnings = extra_warnings;
    warnings.extend(run.warnings);
    warnings.extend(assess.warnings);

    Ok(IterationRecord {
        action,
        chain: run.chain,
        assessment,
        seconds: extra_seconds + run.seconds + assess.seconds,
        template_ids,
        warnings,
    })
}

/// Applies the configured scoring mode. Verdicts, feedback, and the flaw
/// step always come from the prompted judge; only the chain-level score is
/// replaced or blended.
fn moderated(
    config: &EngineConfig,
    query: &MultimodalQuery,
    chain: &ReasoningChain,
    prompted: ChainAssessment,
) -> Result<ChainAssessment, EngineFailure> {
    let score = match config.cam_mode {
        CamMode::Prompted => return Ok(prompted),
        CamMode::Trained => surrogate_score(config, query, chain, &prompted)?,
        CamMode::MeanOfBoth => {
            (prompted.score + surrogate_score(config, query, chain, &prompted)?) / 2.0
        }
    };
    ChainAssessment::new(score, prompted.step_verdicts, prompted.feedback, prompted.flaw_step)
        .map_err(EngineFailure::Config)
}

fn surrogate_score(
    config: &EngineConfig,
    query: &MultimodalQuery,
    chain: &ReasoningChain,
    prompted: &ChainAssessment,
) -> Result<f64, EngineFailure> {
    let scorer = config
        .scorer
        .as_ref()
        .ok_or_else(|| EngineFailure::Config("trained scoring needs scorer parameters".to_string()))?;
    let features = cam::featurize(&query.text, chain, prompted, config.n_max);
    Ok(cam::score(scorer, &features))
}

fn owned(ids: &[&'static str]) -> Vec<String> {
    ids.iter().map(|s| (*s).to_string()).collect()
}

// ---------------------------------------------------------------------------
// persisted traces

/// Backend metadata worth keeping with a trace; credentials never appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub tau: f64,
    pub k_max: usize,
    pub n_max: usize,
    pub cam_mode: CamMode,
    pub seed: u64,
    pub backend_kind: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub script_entries: usize,
    pub templates: String,
}

impl ConfigSnapshot {
    pub fn of(config: &EngineConfig) -> Self {
        ConfigSnapshot {
            tau: config.tau,
            k_max: config.k_max,
            n_max: config.n_max,
            cam_mode: config.cam_mode,
            seed: config.seed,
            backend_kind: match config.backend.kind {
                BackendKind::Scripted => "scripted".to_string(),
                BackendKind::Http => "http".to_string(),
            },
            model_name: config.backend.model_name.clone(),
            base_url: config.backend.base_url.clone(),
            script_entries: config.backend.script.as_ref().map_or(0, ScriptTableLen::len),
            templates: prompts::TEMPLATE_SET.to_string(),
        }
    }
}

// tiny adapter so the snapshot does not borrow backend internals
trait ScriptTableLen {
    fn len(&self) -> usize;
}

impl ScriptTableLen for crate::backend::ScriptTable {
    fn len(&self) -> usize {
        self.entry_count()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceFormatError {
    #[error("unreadable trace: {0}")]
    Unreadable(String),
    #[error("invalid trace: {0}")]
    Invalid(String),
}

/// A complete persisted run: format tag, settings snapshot, the query, and
/// the full iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub format: String,
    pub config: ConfigSnapshot,
    pub query: MultimodalQuery,
    pub trace: RefinementTrace,
}

impl TraceDocument {
    pub fn new(config: &EngineConfig, query: &MultimodalQuery, trace: RefinementTrace) -> Self {
        TraceDocument {
            format: TRACE_FORMAT.to_string(),
            config: ConfigSnapshot::of(config),
            query: query.clone(),
            trace,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialize") + "\n"
    }

    /// Parses and cross-checks a persisted trace: the selection must be
    /// recomputable, every chain structurally valid and fully judged, the
    /// iteration numbering dense, and the stated termination consistent
    /// with the scores and the snapshot's threshold and budget.
    pub fn from_json(raw: &str) -> Result<Self, TraceFormatError> {
        let doc: TraceDocument =
            serde_json::from_str(raw).map_err(|e| TraceFormatError::Unreadable(e.to_string()))?;
        doc.validate().map_err(TraceFormatError::Invalid)?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.format != TRACE_FORMAT {
            return Err(format!("unknown trace format '{}'", self.format));
        }
        let iterations = &self.trace.iterations;
        if iterations.is_empty() {
            return Err("trace has no iterations".to_string());
        }
        for (idx, it) in iterations.iter().enumerate() {
            if let Err(v) = validate_chain(&it.chain) {
                return Err(format!("iteration {idx}: {v}"));
            }
            if it.chain.iteration != idx {
                return Err(format!(
                    "iteration {idx} carries chain iteration {}",
                    it.chain.iteration
                ));
            }
            if it.assessment.step_verdicts.len() != it.chain.len() {
                return Err(format!(
                    "iteration {idx}: {} verdicts for {} steps",
                    it.assessment.step_verdicts.len(),
                    it.chain.len()
                ));
            }
            let initial_ok = matches!(it.action, ActionTaken::Initial) == (idx == 0);
            if !initial_ok {
                return Err(format!("iteration {idx}: action kind out of place"));
            }
        }
        if self.trace.selected >= iterations.len()
            || self.trace.selected != select_best(iterations)
        {
            return Err(format!(
                "selected iteration {} is not the best-scoring one",
                self.trace.selected
            ));
        }
        let last_score = iterations.last().expect("non-empty").assessment.score;
        match self.trace.termination {
            Termination::ThresholdMet => {
                if last_score < self.config.tau {
                    return Err(format!(
                        "termination says threshold met but final score {last_score} < tau {}",
                        self.config.tau
                    ));
                }
                if iterations.len() > self.config.k_max + 1 {
                    return Err("more iterations than the budget allows".to_string());
                }
            }
            Termination::KMaxExhausted => {
                if iterations.len() != self.config.k_max + 1 {
                    return Err(format!(
                        "budget exhaustion implies {} iterations, trace has {}",
                        self.config.k_max + 1,
                        iterations.len()
                    ));
                }
                if last_score >= self.config.tau {
                    return Err(
                        "termination says budget exhausted but the final score met tau".to_string()
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RoleTag, ScriptTable, ScriptedBackend};
    use crate::chain::StepVerdict;

    fn verdict(score: u8, flaw: &str) -> String {
        format!("SCORE: {score}\nFLAW: {flaw}")
    }

    fn assessment(step_scores: &[(f64, FlawClass)], chain_score: f64) -> ChainAssessment {
        let verdicts = step_scores
            .iter()
            .map(|&(score, flaw)| StepVerdict { score, flaw })
            .collect::<Vec<_>>();
        let weakest = verdicts
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| a.score.partial_cmp(&b.score).unwrap().then(ia.cmp(ib)))
            .map(|(i, _)| i + 1);
        ChainAssessment::new(chain_score, verdicts, "t", weakest).unwrap()
    }

    #[test]
    fn routing_follows_the_weakest_flaw() {
        let a = assessment(
            &[(0.9, FlawClass::Consistent), (0.2, FlawClass::DecompositionFlaw)],
            0.5,
        );
        assert_eq!(route_feedback(&a), RouteDecision::Redecompose { from_step: 2 });

        let b = assessment(&[(0.3, FlawClass::FactualFlaw), (0.9, FlawClass::Consistent)], 0.5);
        assert_eq!(route_feedback(&b), RouteDecision::Reinfer { step: 1 });

        // all consistent but low: re-infer the weakest step
        let c = assessment(
            &[(0.8, FlawClass::Consistent), (0.6, FlawClass::Consistent), (0.7, FlawClass::Consistent)],
            0.7,
        );
        assert_eq!(route_feedback(&c), RouteDecision::Reinfer { step: 2 });
    }

    #[test]
    fn termination_checks_threshold_before_budget() {
        assert_eq!(should_terminate(0.9, 3, 0.85, 3), Some(Termination::ThresholdMet));
        assert_eq!(should_terminate(0.85, 0, 0.85, 3), Some(Termination::ThresholdMet));
        assert_eq!(should_terminate(0.5, 3, 0.85, 3), Some(Termination::KMaxExhausted));
        assert_eq!(should_terminate(0.5, 1, 0.85, 3), None);
        assert_eq!(should_terminate(0.5, 0, 0.85, 0), Some(Termination::KMaxExhausted));
    }

    fn record_with_score(score: f64) -> IterationRecord {
        IterationRecord {
            action: ActionTaken::Initial,
            chain: ReasoningChain {
                query_id: "q".to_string(),
                steps: Vec::new(),
                final_answer: "a".to_string(),
                iteration: 0,
            },
            assessment: assessment(&[(score, FlawClass::Consistent)], score),
            seconds: 0.0,
            template_ids: Vec::new(),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn selection_takes_the_earliest_maximum() {
        let recs: Vec<IterationRecord> =
            [0.3, 0.8, 0.8, 0.5].iter().map(|&s| record_with_score(s)).collect();
        assert_eq!(select_best(&recs), 1);
        let single = vec![record_with_score(0.1)];
        assert_eq!(select_best(&single), 0);
    }

    fn scripted_config(table: ScriptTable) -> EngineConfig {
        EngineConfig::new(BackendConfig::scripted(table))
    }

    /// Script: 2-step decomposition; first pass scores 0.6 with an
    /// inference flaw at step 2; second pass re-answers step 2 and clears
    /// the bar.
    fn reinfer_script() -> ScriptTable {
        let mut t = ScriptTable::new();
        t.push(RoleTag::Rdu, "1. [T] what color is it?\n2. [T] what shape is it?");
        // iteration 0
        t.push(RoleTag::Cie, "blue");
        t.push(RoleTag::Cie, "square, maybe");
        t.push(RoleTag::Cie, "a blue square");
        t.push(RoleTag::Cam, verdict(8, "consistent"));
        t.push(RoleTag::Cam, verdict(4, "inference-flaw"));
        t.push(RoleTag::Cam, verdict(6, "consistent"));
        // iteration 1: re-answer step 2 + synthesis
        t.push(RoleTag::Cie, "round");
        t.push(RoleTag::Cie, "a blue circle");
        t.push(RoleTag::Cam, verdict(9, "consistent"));
        t.push(RoleTag::Cam, verdict(9, "consistent"));
        t.push(RoleTag::Cam, verdict(9, "consistent"));
        t
    }

    #[test]
    fn reinference_reuses_answers_before_the_flawed_step() {
        let backend = ScriptedBackend::new(reinfer_script());
        let config = scripted_config(ScriptTable::new());
        let query = MultimodalQuery::new("q1", None, "describe the object");
        let trace = run_with_backend(&query, &config, &backend).unwrap();

        assert_eq!(trace.iterations.len(), 2);
        assert_eq!(trace.iterations[0].action, ActionTaken::Initial);
        assert_eq!(trace.iterations[1].action, ActionTaken::Reinferred { step: 2 });
        assert_eq!(trace.scores(), vec![0.6, 0.9]);
        assert_eq!(trace.termination, Termination::ThresholdMet);
        assert_eq!(trace.selected, 1);
        assert_eq!(trace.final_answer(), "a blue circle");

        // step 1's answer carried over verbatim; iteration numbering dense
        assert_eq!(trace.iterations[1].chain.steps[0].answer.text, "blue");
        assert_eq!(trace.iterations[0].chain.iteration, 0);
        assert_eq!(trace.iterations[1].chain.iteration, 1);

        // call accounting: rdu 1; cie (N+1) + (N-2+2) = 5; cam 2*(N+1) = 6
        assert_eq!(backend.count_for(RoleTag::Rdu), 1);
        assert_eq!(backend.count_for(RoleTag::Cie), 5);
        assert_eq!(backend.count_for(RoleTag::Cam), 6);
        assert_eq!(trace.iterations[1].seconds, 0.0);
    }

    #[test]
    fn decomposition_flaws_trigger_revision_with_prefix_reuse() {
        let mut t = ScriptTable::new();
        t.push(RoleTag::Rdu, "1. [T] count the dogs\n2. [T] count the cats");
        t.push(RoleTag::Cie, "three dogs");
        t.push(RoleTag::Cie, "two cats");
        t.push(RoleTag::Cie, "five animals");
        t.push(RoleTag::Cam, verdict(10, "consistent"));
        t.push(RoleTag::Cam, verdict(2, "decomposition-flaw"));
        t.push(RoleTag::Cam, verdict(6, "consistent"));
        // revision keeps step 1 verbatim, swaps step 2
        t.push(RoleTag::Rdu, "1. [T] count the dogs\n2. [T] count the birds");
        t.push(RoleTag::Cie, "four birds");
        t.push(RoleTag::Cie, "seven animals");
        t.push(RoleTag::Cam, verdict(10, "consistent"));
        t.push(RoleTag::Cam, verdict(10, "consistent"));
        t.push(RoleTag::Cam, verdict(10, "consistent"));

        let backend = ScriptedBackend::new(t);
        let config = scripted_config(ScriptTable::new());
        let query = MultimodalQuery::new("q2", None, "how many animals are there?");
        let trace = run_with_backend(&query, &config, &backend).unwrap();

        assert_eq!(trace.iterations[1].action, ActionTaken::Redecomposed { from_step: 2 });
        assert_eq!(trace.termination, Termination::ThresholdMet);
        let revised = &trace.iterations[1].chain;
        assert_eq!(revised.steps[0].answer.text, "three dogs", "shared prefix answer reused");
        assert_eq!(revised.steps[1].problem.text, "count the birds");
        assert_eq!(revised.final_answer, "seven animals");

        // rdu called twice; the revision prompt embeds the prior lines and rationale
        assert_eq!(backend.count_for(RoleTag::Rdu), 2);
        let revision_prompt = backend.calls_for(RoleTag::Rdu)[1].request.joined_text();
        assert!(revision_prompt.contains("1. [T] count the dogs"));
        assert!(revision_prompt.contains("2. [T] count the cats"));
        assert!(revision_prompt.contains("weakest step 2"));
        // cie: 3 + 2 (step 2 + synthesis only)
        assert_eq!(backend.count_for(RoleTag::Cie), 5);
    }

    #[test]
    fn budget_exhaustion_selects_the_best_seen_not_the_last() {
        let mut t = ScriptTable::new();
        t.push(RoleTag::Rdu, "1. [T] the only step");
        // iteration 0: 0.8
        t.push(RoleTag::Cie, "first answer");
        t.push(RoleTag::Cie, "first final");
        t.push(RoleTag::Cam, verdict(8, "consistent"));
        t.push(RoleTag::Cam, verdict(8, "consistent"));
        // iteration 1 (reinfer step 1, all-consistent-but-low): 0.6
        t.push(RoleTag::Cie, "second answer");
        t.push(RoleTag::Cie, "second final");
        t.push(RoleTag::Cam, verdict(6, "consistent"));
        t.push(RoleTag::Cam, verdict(6, "consistent"));

        let backend = ScriptedBackend::new(t);
        let mut config = scripted_config(ScriptTable::new());
        config.tau = 0.99;
        config.k_max = 1;
        let query = MultimodalQuery::new("q3", None, "one-step query");
        let trace = run_with_backend(&query, &config, &backend).unwrap();

        assert_eq!(trace.termination, Termination::KMaxExhausted);
        assert_eq!(trace.scores(), vec![0.8, 0.6]);
        assert_eq!(trace.selected, 0, "earlier, higher-scoring chain answers");
        assert_eq!(trace.final_answer(), "first final");
        assert_eq!(trace.iterations[1].action, ActionTaken::Reinferred { step: 1 });
    }

    #[test]
    fn trained_mode_replaces_the_score_and_mean_mode_blends_it() {
        let mut t = ScriptTable::new();
        t.push(RoleTag::Rdu, "1. [T] step one");
        t.push(RoleTag::Cie, "an answer");
        t.push(RoleTag::Cie, "a final answer");
        t.push(RoleTag::Cam, verdict(4, "consistent"));
        t.push(RoleTag::Cam, verdict(4, "consistent"));

        // strongly positive bias: surrogate score saturates near 1
        let scorer = CamScorerParams::new(vec![0.0; crate::cam::FEATURE_DIM], 10.0, 0.2).unwrap();
        let query = MultimodalQuery::new("q4", None, "anything");

        let backend = ScriptedBackend::new(t.clone());
        let mut config = scripted_config(ScriptTable::new());
        config.cam_mode = CamMode::Trained;
        config.scorer = Some(scorer.clone());
        let trace = run_with_backend(&query, &config, &backend).unwrap();
        assert_eq!(trace.iterations.len(), 1, "surrogate score met tau immediately");
        assert!(trace.iterations[0].assessment.score > 0.99);
        // verdicts stay prompted
        assert_eq!(trace.iterations[0].assessment.step_verdicts[0].score, 0.4);

        let backend = ScriptedBackend::new(t);
        config.cam_mode = CamMode::MeanOfBoth;
        config.tau = 0.65; // the blend lands just under 0.7
        let trace = run_with_backend(&query, &config, &backend).unwrap();
        let expected = (0.4 + 1.0 / (1.0 + (-10.0f64).exp())) / 2.0;
        assert!((trace.iterations[0].assessment.score - expected).abs() < 1e-12);
        assert_eq!(trace.termination, Termination::ThresholdMet);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut config = scripted_config(ScriptTable::new());
        assert!(config.validate().is_ok());
        config.tau = 0.0;
        assert!(config.validate().is_err());
        config.tau = 1.01;
        assert!(config.validate().is_err());
        config.tau = 1.0;
        assert!(config.validate().is_ok());
        config.n_max = 0;
        assert!(config.validate().is_err());
        config.n_max = 8;
        config.cam_mode = CamMode::Trained;
        assert!(config.validate().is_err(), "trained mode without scorer");
        config.scorer = Some(CamScorerParams::zeros(0.2).unwrap());
        assert!(config.validate().is_ok());
    }

    #[test]
    fn config_defaults_fill_in_from_minimal_json() {
        let raw = r#"{"backend": {"kind": "scripted", "model_name": "scripted", "script": {}}}"#;
        let config: EngineConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(config.tau, 0.85);
        assert_eq!(config.k_max, 3);
        assert_eq!(config.n_max, 8);
        assert_eq!(config.cam_mode, CamMode::Prompted);
        assert_eq!(config.seed, 42);
        assert!(config.scorer.is_none());

        let bad = r#"{"backend": {"kind": "scripted", "model_name": "s", "script": {}}, "tua": 0.9}"#;
        assert!(serde_json::from_str::<EngineConfig>(bad).is_err(), "typo fields rejected");
    }

    #[test]
    fn backend_failure_mid_loop_surfaces_the_partial_trace() {
        let mut t = ScriptTable::new();
        t.push(RoleTag::Rdu, "1. [T] the step");
        t.push(RoleTag::Cie, "an answer");
        t.push(RoleTag::Cie, "a final");
        t.push(RoleTag::Cam, verdict(3, "inference-flaw"));
        t.push(RoleTag::Cam, verdict(3, "consistent"));
        // nothing left for iteration 1's re-inference
        let backend = ScriptedBackend::new(t);
        let config = scripted_config(ScriptTable::new());
        let query = MultimodalQuery::new("q5", None, "doomed");
        let err = run_with_backend(&query, &config, &backend).unwrap_err();
        assert_eq!(err.partial.len(), 1);
        assert!(matches!(err.failure, EngineFailure::Cie(_)));
        assert!(err.to_string().contains("after 1 completed iteration(s)"));
    }

    #[test]
    fn trace_documents_roundtrip_and_reject_tampering() {
        let backend = ScriptedBackend::new(reinfer_script());
        let config = scripted_config(reinfer_script());
        let query = MultimodalQuery::new("q1", None, "describe the object");
        let trace = run_with_backend(&query, &config, &backend).unwrap();
        let doc = TraceDocument::new(&config, &query, trace);

        let raw = doc.to_json_pretty();
        let back = TraceDocument::from_json(&raw).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.config.backend_kind, "scripted");
        assert!(!raw.contains("api_key"), "credentials never serialized");

        let mut tampered = doc.clone();
        tampered.trace.selected = 0;
        let raw = tampered.to_json_pretty();
        let err = TraceDocument::from_json(&raw).unwrap_err();
        assert!(matches!(err, TraceFormatError::Invalid(_)));

        let mut tampered = doc.clone();
        tampered.format = "cmrf-trace-v0".to_string();
        assert!(TraceDocument::from_json(&tampered.to_json_pretty()).is_err());

        let mut tampered = doc;
        tampered.trace.iterations[1].chain.iteration = 7;
        assert!(TraceDocument::from_json(&tampered.to_json_pretty()).is_err());
    }

    #[test]
    fn runs_are_deterministic_given_the_same_script() {
        let query = MultimodalQuery::new("q1", None, "describe the object");
        let config = scripted_config(reinfer_script());
        let a = run(&query, &config).unwrap();
        let b = run(&query, &config).unwrap();
        let doc_a = TraceDocument::new(&config, &query, a).to_json_pretty();
        let doc_b = TraceDocument::new(&config, &query, b).to_json_pretty();
        assert_eq!(doc_a, doc_b, "byte-identical traces");
    }
}
