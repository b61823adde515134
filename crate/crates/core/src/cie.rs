//! Contextual inference: answer sub-problems one at a time, each in the
//! context of the original query and every answer produced before it.
//!
//! The context for step i contains answers 1..i-1 and nothing else: prompts
//! are built from an explicit prefix, so an answer can never see the future.
//! After the last step a synthesis call produces the chain's final answer.

use crate::backend::{Backend, BackendError, PromptRequest, RoleTag, Sampling};
use crate::chain::{validate_chain, ChainStep, MultimodalQuery, ReasoningChain, StepAnswer, SubProblem};
use crate::prompts::{self, CIE_ALT, CIE_FINAL, CIE_STEP};

/// Character budget for a rendered prompt. When a prompt would run over,
/// the earliest prior answers are folded to one-line summaries, oldest
/// first, until it fits (or everything is summarized).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextBudget {
    pub max_prompt_chars: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        // roughly 4k tokens' worth of characters
        ContextBudget { max_prompt_chars: 16384 }
    }
}

/// Everything a step prompt may draw on: the query and the answered steps
/// before it. Construction checks the prefix is exactly steps 1..len.
#[derive(Debug, Clone, Copy)]
pub struct InferenceContext<'a> {
    query: &'a MultimodalQuery,
    prior: &'a [ChainStep],
}

impl<'a> InferenceContext<'a> {
    pub fn query(&self) -> &MultimodalQuery {
        self.query
    }

    pub fn prior(&self) -> &[ChainStep] {
        self.prior
    }
}

/// Validates that `prior` holds answered steps 1..len in order.
pub fn build_context<'a>(
    query: &'a MultimodalQuery,
    prior: &'a [ChainStep],
) -> Result<InferenceContext<'a>, CieError> {
    for (pos, step) in prior.iter().enumerate() {
        if step.problem.index != pos + 1 || step.answer.index != pos + 1 {
            return Err(CieError::NonContiguousPrior(format!(
                "expected step {} at position {}, found sub-problem {} / answer {}",
                pos + 1,
                pos + 1,
                step.problem.index,
                step.answer.index
            )));
        }
    }
    Ok(InferenceContext { query, prior })
}

/// One answered step plus its trace bookkeeping.
#[derive(Debug, Clone)]
pub struct AnsweredStep {
    pub answer: StepAnswer,
    pub seconds: f64,
    pub template_ids: Vec<&'static str>,
    pub warnings: Vec<String>,
}

/// A full chain run: the chain itself plus aggregated timing, template ids,
/// and any context-overflow warnings.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub chain: ReasoningChain,
    pub seconds: f64,
    pub template_ids: Vec<&'static str>,
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CieError {
    #[error("prior answers are not contiguous: {0}")]
    NonContiguousPrior(String),
    #[error("empty answer at step {step} after retry")]
    EmptyAnswer { step: usize },
    #[error("empty final answer after retry")]
    EmptyFinalAnswer,
    #[error("backend failure at {}: {source}", at_label(.step))]
    Backend { step: Option<usize>, source: BackendError },
}

fn at_label(step: &Option<usize>) -> String {
    match step {
        Some(i) => format!("step {i}"),
        None => "final synthesis".to_string(),
    }
}

/// Renders the "answers so far" block. The first `summarize_first` entries
/// are folded to one line each. Empty for an empty prefix.
pub fn render_context_block(prior: &[ChainStep], summarize_first: usize) -> String {
    if prior.is_empty() {
        return String::new();
    }
    let mut block = String::from("Answers so far:\n");
    for (i, step) in prior.iter().enumerate() {
        let answer = if i < summarize_first {
            one_line_summary(&step.answer.text)
        } else {
            step.answer.text.clone()
        };
        block.push_str(&format!("{}. Q: {} A: {}\n", step.problem.index, step.problem.text, answer));
    }
    block.push('\n');
    block
}

/// First line, capped at 100 characters, with an ellipsis when shortened.
fn one_line_summary(text: &str) -> String {
    let first_line = text.lines().next().unwrap_or("").trim();
    let mut out: String = first_line.chars().take(100).collect();
    if out.chars().count() < text.trim().chars().count() {
        out.push('…');
    }
    out
}

fn region_note(sub: &SubProblem) -> String {
    match &sub.region {
        Some(r) => format!("Focus on the image region (x={}, y={}, w={}, h={}).\n", r.x, r.y, r.w, r.h),
        None => String::new(),
    }
}

/// Renders a prompt from the context block, summarizing the earliest
/// answers one by one until the result fits the budget (or everything is
/// already summarized). Returns the prompt and the summarization count.
pub(crate) fn fit_to_budget<F>(prior: &[ChainStep], budget: ContextBudget, render: F) -> (String, usize)
where
    F: Fn(&str) -> String,
{
    let mut summarized = 0usize;
    loop {
        let context = render_context_block(prior, summarized);
        let prompt = render(&context);
        if prompt.chars().count() <= budget.max_prompt_chars || summarized >= prior.len() {
            return (prompt, summarized);
        }
        summarized += 1;
    }
}

/// Renders the prompt for one step under the budget, returning the prompt
/// and how many leading answers had to be summarized.
fn step_prompt(
    ctx: &InferenceContext<'_>,
    sub: &SubProblem,
    alt: bool,
    budget: ContextBudget,
) -> (String, usize) {
    let note = prompts::image_note(ctx.query.image.is_some());
    let alt_note = if alt { format!("{}\n", CIE_ALT.raw().trim()) } else { String::new() };
    let region = region_note(sub);
    let step_index = sub.index.to_string();
    fit_to_budget(ctx.prior, budget, |context| {
        CIE_STEP.render(&[
            ("question", &ctx.query.text),
            ("image_note", note),
            ("context", context),
            ("step_index", &step_index),
            ("sub_question", &sub.text),
            ("region_note", &region),
            ("alt_note", &alt_note),
        ])
    })
}

/// Answers one sub-problem in context. A blank reply is retried once with
/// the identical request; a second blank reply is an error carrying the
/// step index.
pub fn answer_step(
    backend: &dyn Backend,
    ctx: &InferenceContext<'_>,
    sub: &SubProblem,
    alt: bool,
    sampling: Sampling,
    budget: ContextBudget,
) -> Result<AnsweredStep, CieError> {
    let (prompt, summarized) = step_prompt(ctx, sub, alt, budget);
    let mut warnings = Vec::new();
    if summarized > 0 {
        warnings.push(format!(
            "context overflow before step {}: summarized the {summarized} earliest answer(s)",
            sub.index
        ));
    }
    let mut template_ids = vec![CIE_STEP.id];
    if alt {
        template_ids.push(CIE_ALT.id);
    }

    let request = build_request(ctx.query, prompt, sampling);
    let mut seconds = 0.0;
    let mut text = String::new();
    for attempt in 0..2 {
        let response = backend
            .generate(&request)
            .map_err(|source| CieError::Backend { step: Some(sub.index), source })?;
        seconds += response.latency;
        text = response.text;
        if !text.trim().is_empty() {
            break;
        }
        if attempt == 1 {
            return Err(CieError::EmptyAnswer { step: sub.index });
        }
        warnings.push(format!("blank answer at step {}; retried once", sub.index));
    }

    Ok(AnsweredStep {
        answer: StepAnswer { index: sub.index, text: text.trim().to_string(), raw: text },
        seconds,
        template_ids,
        warnings,
    })
}

/// Runs steps `start..=N` on top of an already-answered prefix, then
/// synthesizes the final answer. `alt_step` marks one step to re-ask with
/// the alternative-phrasing instruction. `run_chain` is the `start == 1`
/// case with an empty prefix.
#[allow(clippy::too_many_arguments)]
pub fn run_chain_from(
    backend: &dyn Backend,
    query: &MultimodalQuery,
    subproblems: &[SubProblem],
    prefix: Vec<ChainStep>,
    start: usize,
    alt_step: Option<usize>,
    iteration: usize,
    sampling: Sampling,
    budget: ContextBudget,
) -> Result<ChainRun, CieError> {
    if subproblems.is_empty() {
        return Err(CieError::NonContiguousPrior("no sub-problems to answer".to_string()));
    }
    if start == 0 || start != prefix.len() + 1 || start > subproblems.len() + 1 {
        return Err(CieError::NonContiguousPrior(format!(
            "start {} does not continue a prefix of {} answered step(s)",
            start,
            prefix.len()
        )));
    }
    for (i, step) in prefix.iter().enumerate() {
        if step.problem != subproblems[i] {
            return Err(CieError::NonContiguousPrior(format!(
                "prefix step {} does not match the sub-problem list",
                i + 1
            )));
        }
    }

    let mut steps = prefix;
    let mut seconds = 0.0;
    let mut template_ids: Vec<&'static str> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();

    for sub in &subproblems[start - 1..] {
        let ctx = build_context(query, &steps)?;
        let alt = alt_step == Some(sub.index);
        let answered = answer_step(backend, &ctx, sub, alt, sampling, budget)?;
        seconds += answered.seconds;
        merge_ids(&mut template_ids, &answered.template_ids);
        warnings.extend(answered.warnings);
        steps.push(ChainStep { problem: sub.clone(), answer: answered.answer });
    }

    // final synthesis over the complete chain
    let note = prompts::image_note(query.image.is_some());
    let (prompt, summarized) = fit_to_budget(&steps, budget, |context| {
        CIE_FINAL.render(&[("question", &query.text), ("image_note", note), ("context", context)])
    });
    if summarized > 0 {
        warnings.push(format!(
            "context overflow before synthesis: summarized the {summarized} earliest answer(s)"
        ));
    }
    merge_ids(&mut template_ids, &[CIE_FINAL.id]);
    let request = build_request(query, prompt, sampling);
    let mut final_answer = String::new();
    for attempt in 0..2 {
        let response = backend
            .generate(&request)
            .map_err(|source| CieError::Backend { step: None, source })?;
        seconds += response.latency;
        final_answer = response.text.trim().to_string();
        if !final_answer.is_empty() {
            break;
        }
        if attempt == 1 {
            return Err(CieError::EmptyFinalAnswer);
        }
        warnings.push("blank final answer; retried once".to_string());
    }

    let chain = ReasoningChain { query_id: query.id.clone(), steps, final_answer, iteration };
    debug_assert!(validate_chain(&chain).is_ok(), "constructed chain violates invariants");
    Ok(ChainRun { chain, seconds, template_ids, warnings })
}

/// Answers every sub-problem from scratch and synthesizes a final answer.
pub fn run_chain(
    backend: &dyn Backend,
    query: &MultimodalQuery,
    subproblems: &[SubProblem],
    iteration: usize,
    sampling: Sampling,
    budget: ContextBudget,
) -> Result<ChainRun, CieError> {
    run_chain_from(backend, query, subproblems, Vec::new(), 1, None, iteration, sampling, budget)
}

fn build_request(query: &MultimodalQuery, prompt: String, sampling: Sampling) -> PromptRequest {
    let mut req = PromptRequest::new(RoleTag::Cie, prompt).with_sampling(sampling);
    if let Some(image) = &query.image {
        req = req.with_image(image.clone());
    }
    req
}

fn merge_ids(into: &mut Vec<&'static str>, ids: &[&'static str]) {
    for id in ids {
        if !into.contains(id) {
            into.push(id);
        }
    }
}
