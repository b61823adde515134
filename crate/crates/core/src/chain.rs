//! Core data model for multimodal reasoning chains.
//!
//! A query is decomposed into indexed sub-problems, each sub-problem gets an
//! answer produced in context, and the whole chain is judged for coherence.
//! Everything downstream (refinement, training, evaluation) consumes these
//! types, so their invariants are enforced at construction and on every
//! deserialization path.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Hard cap on sub-problems per chain unless a config overrides it.
pub const DEFAULT_MAX_SUBPROBLEMS: usize = 8;

/// Which modality a sub-problem interrogates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Visual,
    Textual,
    CrossModal,
}

impl Modality {
    /// Single-letter tag used by the decomposition grammar and the dataset schema.
    pub fn letter(self) -> char {
        match self {
            Modality::Visual => 'V',
            Modality::Textual => 'T',
            Modality::CrossModal => 'X',
        }
    }

    /// Inverse of [`Modality::letter`].
    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'V' => Some(Modality::Visual),
            'T' => Some(Modality::Textual),
            'X' => Some(Modality::CrossModal),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::CrossModal => "cross-modal",
        };
        f.write_str(s)
    }
}

/// Normalized image region: origin plus extent, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Region {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, String> {
        let r = Region { x, y, w, h };
        r.check().map(|()| r)
    }

    /// Bounds check: coordinates in [0,1], strictly positive extent, box inside the unit square.
    pub fn check(&self) -> Result<(), String> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("region has non-finite coordinate".to_string());
        }
        if self.x < 0.0 || self.x > 1.0 || self.y < 0.0 || self.y > 1.0 {
            return Err(format!("region origin ({}, {}) outside [0,1]", self.x, self.y));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("region extent ({}, {}) not positive", self.w, self.h));
        }
        if self.x + self.w > 1.0 || self.y + self.h > 1.0 {
            return Err("region exceeds unit square".to_string());
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, String> {
        Region::new(a[0], a[1], a[2], a[3])
    }
}

/// One unit of the decomposition: an indexed question aimed at one modality,
/// optionally grounded to an image region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubProblem {
    /// 1-based position in the chain.
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub modality: Modality,
}

/// Answer to one sub-problem. `text` is the cleaned answer, `raw` the
/// untouched model output it was extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAnswer {
    pub index: usize,
    pub text: String,
    pub raw: String,
}

/// A sub-problem paired with its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub problem: SubProblem,
    pub answer: StepAnswer,
}

/// Complete reasoning chain for one query at one refinement iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub query_id: String,
    pub steps: Vec<ChainStep>,
    pub final_answer: String,
    /// 0-based refinement iteration this chain was produced in.
    pub iteration: usize,
}

impl ReasoningChain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Answer texts in step order.
    pub fn answer_texts(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.answer.text.as_str())
    }
}

/// The input a chain is built for: identifier, optional image reference
/// (path or URL, passed through to backends untouched), and the question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalQuery {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub text: String,
}

impl MultimodalQuery {
    pub fn new(id: impl Into<String>, image: Option<String>, text: impl Into<String>) -> Self {
        MultimodalQuery { id: id.into(), image, text: text.into() }
    }
}

/// Flaw taxonomy used by the coherence judge and the dataset annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlawClass {
    /// No problem found at this step.
    Consistent,
    /// The sub-problem itself attacks the query incorrectly.
    DecompositionFlaw,
    /// The answer does not follow from the evidence in context.
    InferenceFlaw,
    /// The answer contradicts the image or stated facts.
    FactualFlaw,
}

impl FlawClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FlawClass::Consistent => "consistent",
            FlawClass::DecompositionFlaw => "decomposition-flaw",
            FlawClass::InferenceFlaw => "inference-flaw",
            FlawClass::FactualFlaw => "factual-flaw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "consistent" => Some(FlawClass::Consistent),
            "decomposition-flaw" => Some(FlawClass::DecompositionFlaw),
            "inference-flaw" => Some(FlawClass::InferenceFlaw),
            "factual-flaw" => Some(FlawClass::FactualFlaw),
            _ => None,
        }
    }
}

impl fmt::Display for FlawClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Judgment of a single step: score in [0,1] plus flaw classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub score: f64,
    pub flaw: FlawClass,
}

/// Coherence judgment over a whole chain.
///
/// `score` is the chain-level coherence in [0,1]. `flaw_step` points at the
/// weakest step (1-based) when one exists; routing uses it to decide where
/// refinement resumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AssessmentRepr")]
pub struct ChainAssessment {
    pub score: f64,
    pub step_verdicts: Vec<StepVerdict>,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flaw_step: Option<usize>,
}

/// Unvalidated mirror used to funnel deserialization through the constructor.
#[derive(Deserialize)]
struct AssessmentRepr {
    score: f64,
    step_verdicts: Vec<StepVerdict>,
    feedback: String,
    #[serde(default)]
    flaw_step: Option<usize>,
}

impl TryFrom<AssessmentRepr> for ChainAssessment {
    type Error = String;

    fn try_from(r: AssessmentRepr) -> Result<Self, String> {
        ChainAssessment::new(r.score, r.step_verdicts, r.feedback, r.flaw_step)
    }
}

impl ChainAssessment {
    /// Rejects scores outside [0,1], out-of-range verdicts, and a `flaw_step`
    /// that does not index a verdict.
    pub fn new(
        score: f64,
        step_verdicts: Vec<StepVerdict>,
        feedback: impl Into<String>,
        flaw_step: Option<usize>,
    ) -> Result<Self, String> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(format!("assessment score {score} outside [0,1]"));
        }
        if step_verdicts.is_empty() {
            return Err("assessment carries no step verdicts".to_string());
        }
        for (i, v) in step_verdicts.iter().enumerate() {
            if !v.score.is_finite() || !(0.0..=1.0).contains(&v.score) {
                return Err(format!("verdict score {} at step {} outside [0,1]", v.score, i + 1));
            }
        }
        if let Some(fs) = flaw_step {
            if fs == 0 || fs > step_verdicts.len() {
                return Err(format!("flaw_step {fs} does not index a step verdict"));
            }
        }
        Ok(ChainAssessment { score, step_verdicts, feedback: feedback.into(), flaw_step })
    }

    /// 1-based index of the weakest step, lowest index on ties.
    pub fn weakest_step(&self) -> usize {
        let mut best = 1usize;
        let mut best_score = f64::INFINITY;
        for (i, v) in self.step_verdicts.iter().enumerate() {
            if v.score < best_score {
                best_score = v.score;
                best = i + 1;
            }
        }
        best
    }

    /// Flaw class of the weakest step.
    pub fn weakest_flaw(&self) -> FlawClass {
        self.step_verdicts[self.weakest_step() - 1].flaw
    }
}

/// First violated chain invariant, if any. Violations are data, not panics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainViolation {
    /// 1-based step the violation was found at, when it is step-local.
    pub step: Option<usize>,
    pub reason: String,
}

impl fmt::Display for ChainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(s) => write!(f, "{} (step {})", self.reason, s),
            None => f.write_str(&self.reason),
        }
    }
}

/// Checks every structural invariant and reports the first failure:
/// non-empty chain, 1..N contiguous indices, matching answer indices,
/// non-blank texts, in-bounds regions, non-empty final answer.
pub fn validate_chain(chain: &ReasoningChain) -> Result<(), ChainViolation> {
    if chain.steps.is_empty() {
        return Err(ChainViolation { step: None, reason: "chain has no steps".to_string() });
    }
    for (pos, step) in chain.steps.iter().enumerate() {
        let expect = pos + 1;
        if step.problem.index != expect {
            return Err(ChainViolation {
                step: Some(expect),
                reason: format!(
                    "non-contiguous index at position {expect}: found {}",
                    step.problem.index
                ),
            });
        }
        if step.answer.index != step.problem.index {
            return Err(ChainViolation {
                step: Some(expect),
                reason: format!(
                    "answer index {} does not match sub-problem index {}",
                    step.answer.index, step.problem.index
                ),
            });
        }
        if step.problem.text.trim().is_empty() {
            return Err(ChainViolation {
                step: Some(expect),
                reason: format!("empty sub-problem text at step {expect}"),
            });
        }
        if step.answer.text.trim().is_empty() {
            return Err(ChainViolation {
                step: Some(expect),
                reason: format!("empty answer text at step {expect}"),
            });
        }
        if let Some(region) = &step.problem.region {
            if let Err(why) = region.check() {
                return Err(ChainViolation { step: Some(expect), reason: format!("{why} at step {expect}") });
            }
        }
    }
    if chain.final_answer.trim().is_empty() {
        return Err(ChainViolation { step: None, reason: "empty final answer".to_string() });
    }
    Ok(())
}

/// Chain (de)serialization failure.
#[derive(Debug, thiserror::Error)]
pub enum ChainFormatError {
    #[error("malformed chain record: {0}")]
    Malformed(String),
}

/// One self-describing text record per chain. Field order is fixed by the
/// struct, so equal chains serialize to equal bytes.
pub fn serialize_chain(chain: &ReasoningChain) -> String {
    serde_json::to_string(chain).expect("chain serialization is infallible")
}

/// Parses and validates; anything that fails an invariant is malformed input,
/// not a panic.
pub fn deserialize_chain(raw: &str) -> Result<ReasoningChain, ChainFormatError> {
    let chain: ReasoningChain =
        serde_json::from_str(raw).map_err(|e| ChainFormatError::Malformed(e.to_string()))?;
    validate_chain(&chain).map_err(|v| ChainFormatError::Malformed(v.to_string()))?;
    Ok(chain)
}
