//! Reasoning decomposition: turn a multimodal query into an ordered list of
//! sub-problems.
//!
//! The model is asked for numbered lines in the grammar
//! `<int>. [<V|T|X>] (<x>,<y>,<w>,<h>)? <text>`. Parsing is liberal-in:
//! lines that do not match the grammar (or carry an out-of-bounds region)
//! are ignored, matched lines are renumbered by order of appearance, and a
//! reply with no usable line earns exactly one repair retry before the
//! decomposition is declared unparseable.

use crate::backend::{Backend, BackendError, PromptRequest, RoleTag, Sampling};
use crate::chain::{Modality, MultimodalQuery, Region, SubProblem};
use crate::prompts::{self, Template, RDU_DECOMPOSE, RDU_REPAIR, RDU_REVISE};
use regex::Regex;
use std::sync::OnceLock;

/// Assessment outcome handed back to the decomposer: the sub-problems that
/// were judged, why the chain failed, and where the flaw starts.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionFeedback {
    pub prior: Vec<SubProblem>,
    pub rationale: String,
    /// 1-based step the revision starts at; always indexes `prior`.
    pub flaw_step: usize,
}

impl DecompositionFeedback {
    pub fn new(
        prior: Vec<SubProblem>,
        rationale: impl Into<String>,
        flaw_step: usize,
    ) -> Result<Self, RduError> {
        if prior.is_empty() {
            return Err(RduError::InvalidFeedback("feedback carries no prior sub-problems".to_string()));
        }
        if flaw_step == 0 || flaw_step > prior.len() {
            return Err(RduError::InvalidFeedback(format!(
                "flaw_step {flaw_step} does not index the {} prior sub-problems",
                prior.len()
            )));
        }
        Ok(DecompositionFeedback { prior, rationale: rationale.into(), flaw_step })
    }
}

/// A parsed decomposition plus everything the trace wants to know about how
/// it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub subproblems: Vec<SubProblem>,
    pub warnings: Vec<String>,
    pub template_ids: Vec<&'static str>,
    /// Wall seconds spent in backend calls.
    pub seconds: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RduError {
    #[error("decomposition unparseable after repair retry: {detail}")]
    Unparseable { detail: String },
    #[error("decomposition reply contains no usable line")]
    EmptyDecomposition,
    #[error("invalid decomposition feedback: {0}")]
    InvalidFeedback(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?x)^\s*
              \d+ [.)] \s*                       # ordinal, re-assigned by appearance
              \[ ([VTX]) \] \s*                  # modality tag
              (?: \( \s* ([0-9]*\.?[0-9]+) \s*,\s* ([0-9]*\.?[0-9]+) \s*,\s*
                         ([0-9]*\.?[0-9]+) \s*,\s* ([0-9]*\.?[0-9]+) \s* \) \s* )?
              (\S.*?) \s*$",
        )
        .expect("decomposition grammar compiles")
    })
}

/// Extracts every grammar-conforming line, in order, renumbered 1..N.
/// Lines that fail the grammar or carry an invalid region are skipped;
/// a reply with no usable line is an error, never an empty list.
pub fn parse_decomposition(raw: &str) -> Result<Vec<SubProblem>, RduError> {
    let re = line_pattern();
    let mut out = Vec::new();
    for line in raw.lines() {
        let Some(caps) = re.captures(line) else { continue };
        let modality = Modality::from_letter(
            caps.get(1).expect("modality group").as_str().chars().next().expect("single letter"),
        )
        .expect("regex restricts to VTX");
        let region = match (caps.get(2), caps.get(3), caps.get(4), caps.get(5)) {
            (Some(x), Some(y), Some(w), Some(h)) => {
                let parse = |m: regex::Match| m.as_str().parse::<f64>();
                match (parse(x), parse(y), parse(w), parse(h)) {
                    (Ok(x), Ok(y), Ok(w), Ok(h)) => match Region::new(x, y, w, h) {
                        Ok(r) => Some(r),
                        // invalid box: drop the line, same as any grammar miss
                        Err(_) => continue,
                    },
                    _ => continue,
                }
            }
            _ => None,
        };
        let text = caps.get(6).expect("text group").as_str().trim().to_string();
        out.push(SubProblem { index: out.len() + 1, text, region, modality });
    }
    if out.is_empty() {
        return Err(RduError::EmptyDecomposition);
    }
    Ok(out)
}

/// Renders a sub-problem back into its grammar line. Used when embedding a
/// prior decomposition into a revision prompt, so models (and scripted
/// tables) can echo kept steps verbatim.
pub fn render_subproblem_line(sub: &SubProblem) -> String {
    match &sub.region {
        Some(r) => format!(
            "{}. [{}] ({},{},{},{}) {}",
            sub.index,
            sub.modality.letter(),
            r.x,
            r.y,
            r.w,
            r.h,
            sub.text
        ),
        None => format!("{}. [{}] {}", sub.index, sub.modality.letter(), sub.text),
    }
}

/// Asks the backend for a decomposition (or a revision when feedback is
/// present), parses it, retries once through a repair prompt on a grammar
/// failure, and truncates to `n_max` with a recorded warning.
pub fn decompose(
    backend: &dyn Backend,
    query: &MultimodalQuery,
    feedback: Option<&DecompositionFeedback>,
    n_max: usize,
    sampling: Sampling,
) -> Result<Decomposition, RduError> {
    assert!(n_max >= 1, "n_max must be at least 1");
    let n_max_s = n_max.to_string();
    let note = prompts::image_note(query.image.is_some());

    let (template, prompt): (Template, String) = match feedback {
        None => {
            let p = RDU_DECOMPOSE.render(&[
                ("question", &query.text),
                ("n_max", &n_max_s),
                ("image_note", note),
            ]);
            (RDU_DECOMPOSE, p)
        }
        Some(fb) => {
            let prior_lines: Vec<String> = fb.prior.iter().map(render_subproblem_line).collect();
            let flaw_step = fb.flaw_step.to_string();
            let p = RDU_REVISE.render(&[
                ("question", &query.text),
                ("n_max", &n_max_s),
                ("image_note", note),
                ("prior_steps", &prior_lines.join("\n")),
                ("feedback", &fb.rationale),
                ("flaw_step", &flaw_step),
            ]);
            (RDU_REVISE, p)
        }
    };

    let mut seconds = 0.0;
    let mut template_ids = vec![template.id];
    let mut warnings = Vec::new();

    let response = backend.generate(&request(query, prompt, sampling))?;
    seconds += response.latency;

    let subproblems = match parse_decomposition(&response.text) {
        Ok(subs) => subs,
        Err(_) => {
            // one repair attempt, then give up
            let repair = RDU_REPAIR.render(&[("reply", &response.text), ("n_max", &n_max_s)]);
            template_ids.push(RDU_REPAIR.id);
            warnings.push("decomposition required a repair retry".to_string());
            let retry = backend.generate(&request(query, repair, sampling))?;
            seconds += retry.latency;
            match parse_decomposition(&retry.text) {
                Ok(subs) => subs,
                Err(_) => {
                    return Err(RduError::Unparseable { detail: snippet(&retry.text) });
                }
            }
        }
    };

    let subproblems = if subproblems.len() > n_max {
        warnings.push(format!(
            "decomposition truncated from {} to {} sub-problems",
            subproblems.len(),
            n_max
        ));
        subproblems.into_iter().take(n_max).collect()
    } else {
        subproblems
    };

    Ok(Decomposition { subproblems, warnings, template_ids, seconds })
}

fn request(query: &MultimodalQuery, prompt: String, sampling: Sampling) -> PromptRequest {
    let mut req = PromptRequest::new(RoleTag::Rdu, prompt).with_sampling(sampling);
    if let Some(image) = &query.image {
        req = req.with_image(image.clone());
    }
    req
}

fn snippet(s: &str) -> String {
    let trimmed = s.trim();
    if trimmed.is_empty() {
        return "<empty reply>".to_string();
    }
    trimmed.chars().take(120).collect()
}
