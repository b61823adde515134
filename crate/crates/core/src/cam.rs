//! Coherence assessment: judge a reasoning chain step by step, aggregate a
//! chain-level coherence score, and localize the weakest step for routing.
//!
//! Two scorers coexist. The prompted judge asks the backend for a
//! `SCORE:`/`FLAW:` verdict per step plus one for the final answer; the
//! chain score is the arithmetic mean of all N+1 verdicts. The trained
//! surrogate maps an 8-entry feature vector through a logistic model whose
//! parameters are fit with a pairwise hinge loss
//!
//! ```text
//! L = max(0, m - (s_pos - s_neg))
//! ```
//!
//! over (coherent, flawed) chain pairs by full-batch subgradient descent.

use crate::backend::{Backend, BackendError, PromptRequest, RoleTag, Sampling};
use crate::chain::{ChainAssessment, FlawClass, MultimodalQuery, ReasoningChain, StepVerdict};
use crate::cie::{fit_to_budget, ContextBudget};
use crate::prompts::{self, CAM_FINAL, CAM_REPAIR, CAM_STEP};
use crate::text::token_jaccard;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::OnceLock;

/// Identifier of the feature layout below. Persisted with trained params;
/// loading refuses anything else.
pub const FEATURE_SCHEMA: &str = "cam-features-v1";

/// Feature vector size.
pub const FEATURE_DIM: usize = 8;

/// Fixed-size chain feature vector; every entry lies in [0, 1].
///
/// Layout: normalized chain length; mean step verdict; min step verdict;
/// fraction of steps flagged non-consistent; mean token-Jaccard between
/// consecutive answers; token-Jaccard of final answer vs question; fraction
/// of degenerate answers; factual-flaw indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamFeatureVector(pub [f64; FEATURE_DIM]);

impl CamFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CamError {
    #[error("margin must be positive, got {0}")]
    NonpositiveMargin(f64),
    #[error("no training pairs supplied")]
    NoPairs,
    #[error("invalid scorer parameters: {0}")]
    InvalidParams(String),
    #[error("scorer schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("scorer io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

// ---------------------------------------------------------------------------
// prompted judge

/// A prompted assessment plus its trace bookkeeping.
#[derive(Debug, Clone)]
pub struct AssessRun {
    pub assessment: ChainAssessment,
    pub seconds: f64,
    pub template_ids: Vec<&'static str>,
    pub warnings: Vec<String>,
}

fn score_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*SCORE\s*:\s*(\d{1,3})\s*$").expect("score pattern"))
}

fn flaw_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^\s*FLAW\s*:\s*(consistent|decomposition-flaw|inference-flaw|factual-flaw)\s*$")
            .expect("flaw pattern")
    })
}

/// Extracts the `SCORE: <0..10>` and `FLAW: <class>` lines. Anything
/// missing, duplicated weirdly, or out of range yields `None`.
pub fn parse_verdict(raw: &str) -> Option<(u8, FlawClass)> {
    let score: u8 = score_pattern().captures(raw)?.get(1)?.as_str().parse().ok()?;
    if score > 10 {
        return None;
    }
    let flaw = FlawClass::parse(&flaw_pattern().captures(raw)?.get(1)?.as_str().to_lowercase())?;
    Some((score, flaw))
}

struct JudgedUnit {
    score: u8,
    flaw: FlawClass,
    seconds: f64,
    defaulted: bool,
}

/// One verdict with a single repair retry; an unparseable verdict after
/// repair defaults to 0/inference-flaw rather than aborting the run.
fn judge_unit(backend: &dyn Backend, request: &PromptRequest) -> Result<(JudgedUnit, bool), CamError> {
    let first = backend.generate(request)?;
    let mut seconds = first.latency;
    if let Some((score, flaw)) = parse_verdict(&first.text) {
        return Ok((JudgedUnit { score, flaw, seconds, defaulted: false }, false));
    }
    let repair_prompt = CAM_REPAIR.render(&[("reply", &first.text)]);
    let repair_request = PromptRequest {
        role: RoleTag::Cam,
        text_parts: vec![repair_prompt],
        image_refs: request.image_refs.clone(),
        sampling: request.sampling,
    };
    let second = backend.generate(&repair_request)?;
    seconds += second.latency;
    match parse_verdict(&second.text) {
        Some((score, flaw)) => Ok((JudgedUnit { score, flaw, seconds, defaulted: false }, true)),
        None => Ok((
            JudgedUnit { score: 0, flaw: FlawClass::InferenceFlaw, seconds, defaulted: true },
            true,
        )),
    }
}

/// Judges every step in context plus the final answer: N+1 backend calls
/// (more only when a verdict needs its one repair retry). The chain score
/// is the mean of all N+1 verdicts; the flaw step is the weakest step,
/// lowest index on ties.
pub fn assess(
    backend: &dyn Backend,
    query: &MultimodalQuery,
    chain: &ReasoningChain,
    sampling: Sampling,
    budget: ContextBudget,
) -> Result<AssessRun, CamError> {
    assert!(!chain.is_empty(), "cannot assess an empty chain");
    let note = prompts::image_note(query.image.is_some());
    let mut seconds = 0.0;
    let mut template_ids: Vec<&'static str> = vec![CAM_STEP.id];
    let mut warnings = Vec::new();
    let mut repair_used = false;
    let mut verdicts: Vec<StepVerdict> = Vec::with_capacity(chain.len());
    let mut raw_scores: Vec<u8> = Vec::with_capacity(chain.len() + 1);
    let mut default_notes: Vec<String> = Vec::new();

    for (pos, step) in chain.steps.iter().enumerate() {
        let step_index = (pos + 1).to_string();
        let (prompt, _) = fit_to_budget(&chain.steps[..pos], budget, |context| {
            CAM_STEP.render(&[
                ("question", &query.text),
                ("image_note", note),
                ("context", context),
                ("step_index", &step_index),
                ("sub_question", &step.problem.text),
                ("answer", &step.answer.text),
            ])
        });
        let (unit, repaired) = judge_unit(backend, &request(query, prompt, sampling))?;
        seconds += unit.seconds;
        repair_used |= repaired;
        if unit.defaulted {
            default_notes.push(format!(
                "step {} verdict unparseable after repair; defaulted to 0/inference-flaw",
                pos + 1
            ));
        }
        raw_scores.push(unit.score);
        verdicts.push(StepVerdict { score: f64::from(unit.score) / 10.0, flaw: unit.flaw });
    }

    // final-answer verdict
    let (prompt, _) = fit_to_budget(&chain.steps, budget, |context| {
        CAM_FINAL.render(&[
            ("question", &query.text),
            ("image_note", note),
            ("context", context),
            ("final_answer", &chain.final_answer),
        ])
    });
    template_ids.push(CAM_FINAL.id);
    let (final_unit, repaired) = judge_unit(backend, &request(query, prompt, sampling))?;
    seconds += final_unit.seconds;
    repair_used |= repaired;
    if final_unit.defaulted {
        default_notes
            .push("final verdict unparseable after repair; defaulted to 0/inference-flaw".to_string());
    }
    raw_scores.push(final_unit.score);

    if repair_used {
        template_ids.push(CAM_REPAIR.id);
        warnings.push("at least one verdict needed a repair retry".to_string());
    }
    warnings.extend(default_notes.iter().cloned());

    let total: u32 = raw_scores.iter().map(|&v| u32::from(v)).sum();
    let score = f64::from(total) / (10.0 * raw_scores.len() as f64);

    let weakest = verdicts
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.score.partial_cmp(&b.score).expect("finite").then(ia.cmp(ib)))
        .map(|(i, _)| i + 1)
        .expect("non-empty chain");
    let weakest_verdict = verdicts[weakest - 1];

    let mut feedback = format!(
        "weakest step {weakest} ('{}') scored {}/10 with {}; final answer scored {}/10 with {}",
        chain.steps[weakest - 1].problem.text,
        raw_scores[weakest - 1],
        weakest_verdict.flaw,
        final_unit.score,
        final_unit.flaw
    );
    for note in &default_notes {
        feedback.push_str("; ");
        feedback.push_str(note);
    }

    let assessment = ChainAssessment::new(score, verdicts, feedback, Some(weakest))
        .map_err(CamError::InvalidParams)?;
    Ok(AssessRun { assessment, seconds, template_ids, warnings })
}

fn request(query: &MultimodalQuery, prompt: String, sampling: Sampling) -> PromptRequest {
    let mut req = PromptRequest::new(RoleTag::Cam, prompt).with_sampling(sampling);
    if let Some(image) = &query.image {
        req = req.with_image(image.clone());
    }
    req
}

// ---------------------------------------------------------------------------
// features

/// Builds the 8-entry feature vector for a chain under an assessment.
/// The question text feeds the answer-relevance entry; `n_max` normalizes
/// the length entry.
pub fn featurize(
    question: &str,
    chain: &ReasoningChain,
    assessment: &ChainAssessment,
    n_max: usize,
) -> CamFeatureVector {
    assert!(n_max >= 1, "n_max must be at least 1");
    debug_assert_eq!(
        assessment.step_verdicts.len(),
        chain.len(),
        "assessment must cover every chain step"
    );
    let n = chain.len() as f64;
    let verdicts = &assessment.step_verdicts;

    let f_len = (n / n_max as f64).min(1.0);
    let f_mean = verdicts.iter().map(|v| v.score).sum::<f64>() / verdicts.len() as f64;
    let f_min = verdicts.iter().map(|v| v.score).fold(f64::INFINITY, f64::min);
    let f_flagged =
        verdicts.iter().filter(|v| v.flaw != FlawClass::Consistent).count() as f64 / verdicts.len() as f64;

    let answers: Vec<&str> = chain.answer_texts().collect();
    let f_drift = if answers.len() >= 2 {
        let mut total = 0.0;
        for pair in answers.windows(2) {
            total += token_jaccard(pair[0], pair[1]);
        }
        total / (answers.len() - 1) as f64
    } else {
        0.0
    };
    let f_relevance = token_jaccard(&chain.final_answer, question);
    let f_degenerate = answers
        .iter()
        .filter(|a| crate::text::normalized_tokens(a).is_empty())
        .count() as f64
        / n;
    let f_factual =
        if verdicts.iter().any(|v| v.flaw == FlawClass::FactualFlaw) { 1.0 } else { 0.0 };

    let x = [f_len, f_mean, f_min, f_flagged, f_drift, f_relevance, f_degenerate, f_factual];
    debug_assert!(x.iter().all(|v| (0.0..=1.0).contains(v)), "feature out of range: {x:?}");
    CamFeatureVector(x)
}

/// Synthesizes the assessment an annotation implies: every step consistent
/// at 1.0, except the annotated flaw step at 0.0 with its flaw class. The
/// final-answer verdict is 1.0 for a clean chain and 0.0 for a flawed one.
pub fn assessment_from_annotation(
    chain: &ReasoningChain,
    flaw: Option<(usize, FlawClass)>,
) -> Result<ChainAssessment, CamError> {
    let n = chain.len();
    if n == 0 {
        return Err(CamError::InvalidParams("cannot annotate an empty chain".to_string()));
    }
    let mut verdicts = vec![StepVerdict { score: 1.0, flaw: FlawClass::Consistent }; n];
    let (final_score, feedback, flaw_step) = match flaw {
        None => (1.0, "annotated consistent chain".to_string(), None),
        Some((step, class)) => {
            if step == 0 || step > n {
                return Err(CamError::InvalidParams(format!(
                    "annotated flaw step {step} outside chain of {n} step(s)"
                )));
            }
            verdicts[step - 1] = StepVerdict { score: 0.0, flaw: class };
            (0.0, format!("annotated {class} at step {step}"), Some(step))
        }
    };
    let total: f64 = verdicts.iter().map(|v| v.score).sum::<f64>() + final_score;
    let score = total / (n as f64 + 1.0);
    ChainAssessment::new(score, verdicts, feedback, flaw_step).map_err(CamError::InvalidParams)
}

// ---------------------------------------------------------------------------
// surrogate scorer

/// Logistic scorer parameters plus the margin they were trained with.
/// The schema tag pins the feature layout; persistence refuses to load a
/// vector trained for a different layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr")]
pub struct CamScorerParams {
    pub schema: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub margin: f64,
}

#[derive(Deserialize)]
struct ParamsRepr {
    schema: String,
    weights: Vec<f64>,
    bias: f64,
    margin: f64,
}

impl TryFrom<ParamsRepr> for CamScorerParams {
    type Error = String;

    fn try_from(r: ParamsRepr) -> Result<Self, String> {
        if r.schema != FEATURE_SCHEMA {
            return Err(format!("scorer schema mismatch: expected {FEATURE_SCHEMA}, found {}", r.schema));
        }
        CamScorerParams::new(r.weights, r.bias, r.margin).map_err(|e| e.to_string())
    }
}

impl CamScorerParams {
    pub fn new(weights: Vec<f64>, bias: f64, margin: f64) -> Result<Self, CamError> {
        if weights.len() != FEATURE_DIM {
            return Err(CamError::InvalidParams(format!(
                "expected {FEATURE_DIM} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(CamError::InvalidParams("non-finite parameter".to_string()));
        }
        if !margin.is_finite() || margin <= 0.0 {
            return Err(CamError::NonpositiveMargin(margin));
        }
        Ok(CamScorerParams { schema: FEATURE_SCHEMA.to_string(), weights, bias, margin })
    }

    pub fn zeros(margin: f64) -> Result<Self, CamError> {
        CamScorerParams::new(vec![0.0; FEATURE_DIM], 0.0, margin)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CamError> {
        let raw = serde_json::to_string_pretty(self).expect("params serialize");
        std::fs::write(path, raw + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CamError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw)
    }

    pub fn from_json(raw: &str) -> Result<Self, CamError> {
        let repr: ParamsRepr = serde_json::from_str(raw)
            .map_err(|e| CamError::InvalidParams(format!("unreadable params: {e}")))?;
        if repr.schema != FEATURE_SCHEMA {
            return Err(CamError::SchemaMismatch {
                expected: FEATURE_SCHEMA.to_string(),
                found: repr.schema,
            });
        }
        CamScorerParams::new(repr.weights, repr.bias, repr.margin)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic coherence score in (0, 1).
pub fn score(params: &CamScorerParams, features: &CamFeatureVector) -> f64 {
    let z: f64 =
        params.weights.iter().zip(features.0.iter()).map(|(w, x)| w * x).sum::<f64>() + params.bias;
    sigmoid(z)
}

/// Pairwise hinge: `max(0, margin - (s_pos - s_neg))`. Zero exactly when
/// the positive outscores the negative by at least the margin.
pub fn hinge_loss(s_pos: f64, s_neg: f64, margin: f64) -> Result<f64, CamError> {
    if !margin.is_finite() || margin <= 0.0 {
        return Err(CamError::NonpositiveMargin(margin));
    }
    let slack = margin - (s_pos - s_neg);
    Ok(if slack > 0.0 { slack } else { 0.0 })
}

/// One featurized contrastive pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedPair {
    pub positive: CamFeatureVector,
    pub negative: CamFeatureVector,
    pub source_id: String,
}

/// A coherent chain and a flawed chain for the same query. The annotation
/// of the negative's flaw feeds its synthetic assessment at featurize time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub question: String,
    pub positive: ReasoningChain,
    pub negative: ReasoningChain,
    pub source_id: String,
    pub negative_flaw: Option<(usize, FlawClass)>,
}

impl TrainingPair {
    /// Both chains must be structurally valid and must not be the same text.
    pub fn new(
        question: impl Into<String>,
        positive: ReasoningChain,
        negative: ReasoningChain,
        source_id: impl Into<String>,
        negative_flaw: Option<(usize, FlawClass)>,
    ) -> Result<Self, CamError> {
        crate::chain::validate_chain(&positive)
            .map_err(|v| CamError::InvalidParams(format!("positive chain: {v}")))?;
        crate::chain::validate_chain(&negative)
            .map_err(|v| CamError::InvalidParams(format!("negative chain: {v}")))?;
        if positive.steps == negative.steps && positive.final_answer == negative.final_answer {
            return Err(CamError::InvalidParams(
                "positive and negative chains have identical content".to_string(),
            ));
        }
        Ok(TrainingPair {
            question: question.into(),
            positive,
            negative,
            source_id: source_id.into(),
            negative_flaw,
        })
    }

    pub fn featurize(&self, n_max: usize) -> Result<FeaturizedPair, CamError> {
        let pos_assessment = assessment_from_annotation(&self.positive, None)?;
        let neg_assessment = assessment_from_annotation(&self.negative, self.negative_flaw)?;
        Ok(FeaturizedPair {
            positive: featurize(&self.question, &self.positive, &pos_assessment, n_max),
            negative: featurize(&self.question, &self.negative, &neg_assessment, n_max),
            source_id: self.source_id.clone(),
        })
    }
}

/// Mean hinge loss of the scorer over featurized pairs.
pub fn mean_loss(params: &CamScorerParams, pairs: &[FeaturizedPair]) -> Result<f64, CamError> {
    if pairs.is_empty() {
        return Err(CamError::NoPairs);
    }
    let mut total = 0.0;
    for pair in pairs {
        let s_pos = score(params, &pair.positive);
        let s_neg = score(params, &pair.negative);
        total += hinge_loss(s_pos, s_neg, params.margin)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Subgradient of the mean hinge loss with respect to (weights, bias).
///
/// For an active pair (positive slack) the pair contributes
/// `-(s_pos' x_pos - s_neg' x_neg)` to the weight gradient and
/// `-(s_pos' - s_neg')` to the bias gradient, with `s' = s (1 - s)`.
/// At the hinge kink the subgradient is taken as zero.
pub fn loss_gradient(
    params: &CamScorerParams,
    pairs: &[FeaturizedPair],
) -> Result<(Vec<f64>, f64), CamError> {
    if pairs.is_empty() {
        return Err(CamError::NoPairs);
    }
    if !params.margin.is_finite() || params.margin <= 0.0 {
        return Err(CamError::NonpositiveMargin(params.margin));
    }
    let mut grad_w = vec![0.0; FEATURE_DIM];
    let mut grad_b = 0.0;
    for pair in pairs {
        let s_pos = score(params, &pair.positive);
        let s_neg = score(params, &pair.negative);
        let slack = params.margin - (s_pos - s_neg);
        if slack <= 0.0 {
            continue;
        }
        let dp = s_pos * (1.0 - s_pos);
        let dn = s_neg * (1.0 - s_neg);
        for (g, (xp, xn)) in grad_w.iter_mut().zip(pair.positive.0.iter().zip(pair.negative.0.iter())) {
            *g -= dp * xp - dn * xn;
        }
        grad_b -= dp - dn;
    }
    let n = pairs.len() as f64;
    for g in &mut grad_w {
        *g /= n;
    }
    Ok((grad_w, grad_b / n))
}

/// Optimizer settings for [`train_cam`]. The full-batch descent below is
/// deterministic; any seeding happens where the caller draws its init.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Training result: the best parameters seen, with the loss trajectory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CamScorerParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    /// Mean loss after each epoch.
    pub loss_history: Vec<f64>,
}

/// Full-batch subgradient descent on the pairwise hinge loss. Returns the
/// best iterate (never worse than the init); stops early only on exact
/// zero loss. With every pair already satisfied at the init, the params
/// come back unchanged.
pub fn train_cam(
    pairs: &[FeaturizedPair],
    init: &CamScorerParams,
    hyper: TrainHyper,
) -> Result<TrainOutcome, CamError> {
    if pairs.is_empty() {
        return Err(CamError::NoPairs);
    }
    if !hyper.learning_rate.is_finite() || hyper.learning_rate <= 0.0 {
        return Err(CamError::InvalidParams(format!(
            "learning rate must be positive, got {}",
            hyper.learning_rate
        )));
    }

    let initial_loss = mean_loss(init, pairs)?;
    let mut current = init.clone();
    let mut best = init.clone();
    let mut best_loss = initial_loss;
    let mut loss_history = Vec::with_capacity(hyper.epochs);
    let mut epochs_run = 0;

    for _ in 0..hyper.epochs {
        if best_loss == 0.0 {
            break;
        }
        let (grad_w, grad_b) = loss_gradient(&current, pairs)?;
        for (w, g) in current.weights.iter_mut().zip(grad_w.iter()) {
            *w -= hyper.learning_rate * g;
        }
        current.bias -= hyper.learning_rate * grad_b;
        epochs_run += 1;

        let loss = mean_loss(&current, pairs)?;
        loss_history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = current.clone();
        }
    }

    Ok(TrainOutcome { params: best, initial_loss, final_loss: best_loss, epochs_run, loss_history })
}

/// Fraction of pairs the scorer ranks correctly (positive strictly above
/// negative).
pub fn ranking_accuracy(params: &CamScorerParams, pairs: &[FeaturizedPair]) -> Result<f64, CamError> {
    if pairs.is_empty() {
        return Err(CamError::NoPairs);
    }
    let correct = pairs
        .iter()
        .filter(|p| score(params, &p.positive) > score(params, &p.negative))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptTable, ScriptedBackend};
    use crate::chain::{ChainStep, Modality, StepAnswer, SubProblem};

    fn chain(answers: &[&str], final_answer: &str) -> ReasoningChain {
        let steps = answers
            .iter()
            .enumerate()
            .map(|(i, a)| ChainStep {
                problem: SubProblem {
                    index: i + 1,
                    text: format!("sub-question {}", i + 1),
                    region: None,
                    modality: Modality::Visual,
                },
                answer: StepAnswer { index: i + 1, text: a.to_string(), raw: a.to_string() },
            })
            .collect();
        ReasoningChain {
            query_id: "q".to_string(),
            steps,
            final_answer: final_answer.to_string(),
            iteration: 0,
        }
    }

    fn query() -> MultimodalQuery {
        MultimodalQuery::new("q", None, "what fruit is on the plate?")
    }

    #[test]
    fn verdict_parsing_accepts_exact_grammar_only() {
        assert_eq!(parse_verdict("SCORE: 7\nFLAW: consistent"), Some((7, FlawClass::Consistent)));
        assert_eq!(
            parse_verdict("preamble\nscore: 0\nflaw: factual-flaw\ntrailing"),
            Some((0, FlawClass::FactualFlaw))
        );
        assert_eq!(parse_verdict("SCORE: 11\nFLAW: consistent"), None);
        assert_eq!(parse_verdict("SCORE: 7"), None);
        assert_eq!(parse_verdict("FLAW: consistent"), None);
        assert_eq!(parse_verdict("SCORE: seven\nFLAW: consistent"), None);
        assert_eq!(parse_verdict("SCORE: 7\nFLAW: bad-vibes"), None);
    }

    #[test]
    fn assess_means_all_verdicts_and_localizes_weakest() {
        // 2 steps scoring 10 and 0 (factual), final 5: S = 15/30 = 0.5
        let mut t = ScriptTable::new();
        t.push(RoleTag::Cam, "SCORE: 10\nFLAW: consistent");
        t.push(RoleTag::Cam, "SCORE: 0\nFLAW: factual-flaw");
        t.push(RoleTag::Cam, "SCORE: 5\nFLAW: consistent");
        let b = ScriptedBackend::new(t);
        let c = chain(&["a pear", "a plum"], "a pear");
        let run = assess(&b, &query(), &c, Sampling::default(), ContextBudget::default()).unwrap();

        assert_eq!(run.assessment.score, 0.5);
        assert_eq!(run.assessment.flaw_step, Some(2));
        assert_eq!(run.assessment.step_verdicts.len(), 2);
        assert_eq!(run.assessment.step_verdicts[1].flaw, FlawClass::FactualFlaw);
        assert!(run.assessment.feedback.contains("weakest step 2"));
        assert!(run.assessment.feedback.contains("final answer scored 5/10"));
        assert_eq!(b.count_for(RoleTag::Cam), 3, "N+1 verdict calls");
        assert_eq!(run.seconds, 0.0);
    }

    #[test]
    fn assess_ties_pick_the_earliest_step() {
        let mut t = ScriptTable::new();
        for _ in 0..4 {
            t.push(RoleTag::Cam, "SCORE: 6\nFLAW: inference-flaw");
        }
        let b = ScriptedBackend::new(t);
        let c = chain(&["x", "y", "z"], "x");
        let run = assess(&b, &query(), &c, Sampling::default(), ContextBudget::default()).unwrap();
        assert_eq!(run.assessment.flaw_step, Some(1));
    }

    #[test]
    fn unparseable_verdict_gets_one_repair_then_defaults() {
        // first step verdict garbage, repaired successfully; second garbage twice -> default
        let mut t = ScriptTable::new();
        t.push(RoleTag::Cam, "it looks fine to me");
        t.push(RoleTag::Cam, "SCORE: 9\nFLAW: consistent");
        t.push(RoleTag::Cam, "hmm");
        t.push(RoleTag::Cam, "still chatting");
        t.push(RoleTag::Cam, "SCORE: 10\nFLAW: consistent");
        let b = ScriptedBackend::new(t);
        let c = chain(&["a", "b"], "c");
        let run = assess(&b, &query(), &c, Sampling::default(), ContextBudget::default()).unwrap();

        // step 1 repaired to 9; step 2 defaulted to 0/inference-flaw; final 10
        assert_eq!(run.assessment.step_verdicts[0].score, 0.9);
        assert_eq!(run.assessment.step_verdicts[1].score, 0.0);
        assert_eq!(run.assessment.step_verdicts[1].flaw, FlawClass::InferenceFlaw);
        assert_eq!(run.assessment.score, 19.0 / 30.0);
        assert_eq!(run.assessment.flaw_step, Some(2));
        assert!(run.assessment.feedback.contains("step 2 verdict unparseable"));
        assert!(run.template_ids.contains(&"cam-repair-v1"));
        assert_eq!(b.count_for(RoleTag::Cam), 5, "3 units, 2 repair retries");
    }

    #[test]
    fn cam_prompts_show_prior_context_only() {
        let mut t = ScriptTable::new();
        for _ in 0..3 {
            t.push(RoleTag::Cam, "SCORE: 10\nFLAW: consistent");
        }
        let b = ScriptedBackend::new(t);
        let c = chain(&["FIRST_ANSWER", "SECOND_ANSWER"], "done");
        assess(&b, &query(), &c, Sampling::default(), ContextBudget::default()).unwrap();
        let calls = b.calls_for(RoleTag::Cam);
        let p1 = calls[0].request.joined_text();
        let p2 = calls[1].request.joined_text();
        let pf = calls[2].request.joined_text();
        assert!(p1.contains("FIRST_ANSWER") && !p1.contains("SECOND_ANSWER"));
        assert!(p2.contains("FIRST_ANSWER") && p2.contains("SECOND_ANSWER"));
        assert!(pf.contains("Final answer: done"));
    }

    #[test]
    fn featurize_matches_the_worked_single_step_example() {
        let c = chain(&["fruit plate apple"], "what fruit is on the plate?");
        // same tokens as the question modulo articles/punctuation
        let a = assessment_from_annotation(&c, None).unwrap();
        let q = "what fruit is on the plate?";
        let x = featurize(q, &c, &a, 8);
        assert_eq!(x.0[0], 1.0 / 8.0);
        assert_eq!(x.0[1], 1.0);
        assert_eq!(x.0[2], 1.0);
        assert_eq!(x.0[3], 0.0);
        assert_eq!(x.0[4], 0.0, "single step has no consecutive pair");
        assert_eq!(x.0[5], token_jaccard("what fruit is on the plate?", q));
        assert_eq!(x.0[6], 0.0);
        assert_eq!(x.0[7], 0.0);
        // identical token sets give full relevance
        let c2 = chain(&["x"], "what fruit is on the plate");
        let a2 = assessment_from_annotation(&c2, None).unwrap();
        assert_eq!(featurize(q, &c2, &a2, 8).0[5], 1.0);
    }

    #[test]
    fn featurize_flags_flaws_and_degenerate_answers() {
        let c = chain(&["a red apple", "???"], "an apple");
        let a = assessment_from_annotation(&c, Some((2, FlawClass::FactualFlaw))).unwrap();
        let x = featurize("what is it?", &c, &a, 8);
        assert_eq!(x.0[0], 2.0 / 8.0);
        assert_eq!(x.0[1], 0.5, "verdicts 1.0 and 0.0");
        assert_eq!(x.0[2], 0.0);
        assert_eq!(x.0[3], 0.5);
        assert_eq!(x.0[6], 0.5, "'???' has no tokens");
        assert_eq!(x.0[7], 1.0);
        assert_eq!(a.score, 1.0 / 3.0, "one good step, one flawed, flawed final");
    }

    #[test]
    fn score_matches_worked_examples() {
        let zeros = CamScorerParams::zeros(0.2).unwrap();
        let x = CamFeatureVector([0.3; FEATURE_DIM]);
        assert_eq!(score(&zeros, &x), 0.5);

        let mut w = vec![0.0; FEATURE_DIM];
        w[0] = 1.0;
        let p = CamScorerParams::new(w, 0.0, 0.2).unwrap();
        let mut feats = [0.0; FEATURE_DIM];
        feats[0] = 3.0f64.ln();
        assert!((score(&p, &CamFeatureVector(feats)) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn hinge_matches_worked_examples() {
        assert_eq!(hinge_loss(0.9, 0.5, 0.2).unwrap(), 0.0);
        assert_eq!(hinge_loss(0.6, 0.6, 0.2).unwrap(), 0.2);
        assert!((hinge_loss(0.55, 0.70, 0.30).unwrap() - 0.45).abs() < 1e-15);
        assert!(matches!(hinge_loss(0.5, 0.5, 0.0), Err(CamError::NonpositiveMargin(_))));
        assert!(matches!(hinge_loss(0.5, 0.5, -0.1), Err(CamError::NonpositiveMargin(_))));
    }

    fn separable_pairs(n: usize) -> Vec<FeaturizedPair> {
        (0..n)
            .map(|i| FeaturizedPair {
                positive: CamFeatureVector([1.0; FEATURE_DIM]),
                negative: CamFeatureVector([0.0; FEATURE_DIM]),
                source_id: format!("p{i}"),
            })
            .collect()
    }

    #[test]
    fn training_separates_a_separable_set() {
        let pairs = separable_pairs(6);
        let init = CamScorerParams::zeros(0.2).unwrap();
        let out = train_cam(&pairs, &init, TrainHyper { learning_rate: 0.5, epochs: 1000 }).unwrap();
        assert!(out.final_loss < 1e-3, "loss {}", out.final_loss);
        assert!(out.final_loss <= out.initial_loss);
        assert_eq!(ranking_accuracy(&out.params, &pairs).unwrap(), 1.0);
        assert!(out.epochs_run <= 1000);
    }

    #[test]
    fn loss_sequence_is_non_increasing_at_small_lr() {
        let pairs = vec![FeaturizedPair {
            positive: CamFeatureVector([0.9, 0.8, 0.7, 0.1, 0.4, 0.6, 0.0, 0.0]),
            negative: CamFeatureVector([0.5, 0.2, 0.0, 0.9, 0.1, 0.2, 0.5, 1.0]),
            source_id: "p".to_string(),
        }];
        let mut w = vec![0.1; FEATURE_DIM];
        w[3] = -0.2;
        let init = CamScorerParams::new(w, 0.05, 0.2).unwrap();
        let out = train_cam(&pairs, &init, TrainHyper { learning_rate: 0.1, epochs: 200 }).unwrap();
        for pair in out.loss_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "loss increased: {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn satisfied_pairs_leave_params_untouched() {
        // positive already far above negative at init
        let mut w = vec![0.0; FEATURE_DIM];
        w[0] = 8.0;
        let init = CamScorerParams::new(w, -4.0, 0.2).unwrap();
        let pairs = separable_pairs(3);
        assert_eq!(mean_loss(&init, &pairs).unwrap(), 0.0);
        let out = train_cam(&pairs, &init, TrainHyper { learning_rate: 0.5, epochs: 50 }).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.epochs_run, 0);
    }

    #[test]
    fn gradient_agrees_with_central_differences() {
        let pairs = vec![
            FeaturizedPair {
                positive: CamFeatureVector([0.8, 0.9, 0.6, 0.1, 0.3, 0.7, 0.0, 0.0]),
                negative: CamFeatureVector([0.4, 0.3, 0.1, 0.8, 0.6, 0.2, 0.5, 1.0]),
                source_id: "a".to_string(),
            },
            FeaturizedPair {
                positive: CamFeatureVector([0.5, 1.0, 0.9, 0.0, 0.2, 0.9, 0.0, 0.0]),
                negative: CamFeatureVector([0.6, 0.1, 0.0, 1.0, 0.9, 0.1, 1.0, 1.0]),
                source_id: "b".to_string(),
            },
        ];
        let params =
            CamScorerParams::new(vec![0.3, -0.2, 0.5, -0.4, 0.1, 0.2, -0.3, 0.4], 0.1, 0.2).unwrap();
        let (gw, gb) = loss_gradient(&params, &pairs).unwrap();
        let h = 1e-6;
        for dim in 0..=FEATURE_DIM {
            let mut plus = params.clone();
            let mut minus = params.clone();
            if dim < FEATURE_DIM {
                plus.weights[dim] += h;
                minus.weights[dim] -= h;
            } else {
                plus.bias += h;
                minus.bias -= h;
            }
            let fd =
                (mean_loss(&plus, &pairs).unwrap() - mean_loss(&minus, &pairs).unwrap()) / (2.0 * h);
            let analytic = if dim < FEATURE_DIM { gw[dim] } else { gb };
            let denom = analytic.abs().max(fd.abs()).max(1e-12);
            assert!(
                (analytic - fd).abs() / denom < 1e-5 || (analytic - fd).abs() < 1e-12,
                "dim {dim}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn params_persistence_roundtrip_and_schema_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.json");
        let p = CamScorerParams::new(vec![0.5; FEATURE_DIM], -0.25, 0.2).unwrap();
        p.save(&path).unwrap();
        let back = CamScorerParams::load(&path).unwrap();
        assert_eq!(back, p);

        let raw = std::fs::read_to_string(&path).unwrap().replace(FEATURE_SCHEMA, "cam-features-v0");
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(CamScorerParams::load(&path), Err(CamError::SchemaMismatch { .. })));

        assert!(CamScorerParams::new(vec![0.5; 3], 0.0, 0.2).is_err());
        assert!(CamScorerParams::new(vec![f64::NAN; FEATURE_DIM], 0.0, 0.2).is_err());
        assert!(matches!(
            CamScorerParams::new(vec![0.0; FEATURE_DIM], 0.0, 0.0),
            Err(CamError::NonpositiveMargin(_))
        ));
    }

    #[test]
    fn training_pair_rejects_identical_content() {
        let c = chain(&["same"], "same final");
        let err = TrainingPair::new("q", c.clone(), c.clone(), "id", None).unwrap_err();
        assert!(err.to_string().contains("identical"));

        let mut other = c.clone();
        other.final_answer = "different".to_string();
        let pair =
            TrainingPair::new("q", c, other, "id", Some((1, FlawClass::InferenceFlaw))).unwrap();
        let feat = pair.featurize(8).unwrap();
        assert_eq!(feat.negative.0[2], 0.0);
        assert_eq!(feat.positive.0[2], 1.0);
    }
}
