//! JSONL dataset of multimodal diagnostic questions: each record carries a
//! gold reasoning chain, optional deliberately flawed chains for
//! contrastive training, and optional answer choices.
//!
//! Loading validates every line and collects rejects with line numbers; in
//! strict mode the first bad line is fatal.

use crate::cam::TrainingPair;
use crate::chain::{
    FlawClass, Modality, MultimodalQuery, ReasoningChain, Region, StepAnswer, SubProblem,
};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// One step of a recorded chain: sub-question, modality, optional region,
/// and the answer the chain gives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdarStep {
    pub q: String,
    #[serde(with = "modality_letter")]
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[f64; 4]>,
    pub a: String,
}

/// A deliberately flawed chain, annotated with what is wrong and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErroneousChain {
    pub steps: Vec<MdarStep>,
    pub flaw: FlawClass,
    /// 1-based index into `steps`.
    pub flaw_step: usize,
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdarRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub question: String,
    pub steps: Vec<MdarStep>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub erroneous_chains: Vec<ErroneousChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

mod modality_letter {
    use super::Modality;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Modality, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.letter().to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Modality, D::Error> {
        let raw = String::deserialize(d)?;
        let mut chars = raw.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Modality::from_letter(c)
                .ok_or_else(|| de::Error::custom(format!("unknown modality letter '{raw}'"))),
            _ => Err(de::Error::custom(format!("modality must be one letter, got '{raw}'"))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Strict { line: usize, reason: String },
}

/// A line the loader refused, with why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

/// Loader output: the accepted records plus every rejected line.
#[derive(Debug, Clone, Default)]
pub struct MdarLoad {
    pub records: Vec<MdarRecord>,
    pub rejected: Vec<RejectedLine>,
}

/// Reads a JSONL dataset file. Lenient mode collects bad lines in
/// `rejected`; strict mode fails on the first one.
pub fn load_mdar(path: impl AsRef<Path>, strict: bool) -> Result<MdarLoad, DatasetError> {
    let raw = std::fs::read_to_string(path)?;
    parse_mdar(&raw, strict)
}

/// [`load_mdar`] on in-memory text.
pub fn parse_mdar(raw: &str, strict: bool) -> Result<MdarLoad, DatasetError> {
    let mut load = MdarLoad::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let reason = match serde_json::from_str::<MdarRecord>(line) {
            Err(e) => Some(format!("unreadable record: {e}")),
            Ok(record) => match validate_record(&record) {
                Err(reason) => Some(reason),
                Ok(()) => {
                    if seen.insert(record.id.clone()) {
                        load.records.push(record);
                        None
                    } else {
                        Some(format!("duplicate id '{}'", record.id))
                    }
                }
            },
        };
        if let Some(reason) = reason {
            if strict {
                return Err(DatasetError::Strict { line: line_no, reason });
            }
            load.rejected.push(RejectedLine { line: line_no, reason });
        }
    }
    Ok(load)
}

/// One compact JSON object per line.
pub fn records_to_jsonl(records: &[MdarRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serialize"));
        out.push('\n');
    }
    out
}

pub fn save_mdar(path: impl AsRef<Path>, records: &[MdarRecord]) -> Result<(), DatasetError> {
    std::fs::write(path, records_to_jsonl(records))?;
    Ok(())
}

/// First problem with a record, if any.
pub fn validate_record(record: &MdarRecord) -> Result<(), String> {
    if record.id.trim().is_empty() {
        return Err("empty id".to_string());
    }
    if record.question.trim().is_empty() {
        return Err("empty question".to_string());
    }
    if record.answer.trim().is_empty() {
        return Err("empty answer".to_string());
    }
    validate_steps(&record.steps, "gold chain")?;
    if let Some(choices) = &record.choices {
        if choices.len() < 2 {
            return Err("choice list needs at least two entries".to_string());
        }
        if choices.iter().any(|c| c.trim().is_empty()) {
            return Err("blank answer choice".to_string());
        }
        if !choices.iter().any(|c| c == &record.answer) {
            return Err(format!("answer '{}' is not among the choices", record.answer));
        }
    }
    for (i, err) in record.erroneous_chains.iter().enumerate() {
        validate_steps(&err.steps, &format!("erroneous chain {i}"))?;
        if err.flaw == FlawClass::Consistent {
            return Err(format!("erroneous chain {i} is annotated consistent"));
        }
        if err.flaw_step == 0 || err.flaw_step > err.steps.len() {
            return Err(format!(
                "erroneous chain {i} flags step {} of {}",
                err.flaw_step,
                err.steps.len()
            ));
        }
        if err.steps == record.steps {
            return Err(format!("erroneous chain {i} is identical to the gold chain"));
        }
    }
    Ok(())
}

fn validate_steps(steps: &[MdarStep], label: &str) -> Result<(), String> {
    if steps.is_empty() {
        return Err(format!("{label} has no steps"));
    }
    for (i, step) in steps.iter().enumerate() {
        if step.q.trim().is_empty() {
            return Err(format!("{label} step {} has an empty question", i + 1));
        }
        if step.a.trim().is_empty() {
            return Err(format!("{label} step {} has an empty answer", i + 1));
        }
        if let Some(raw) = step.region {
            Region::from_array(raw)
                .map_err(|e| format!("{label} step {}: {e}", i + 1))?;
        }
    }
    Ok(())
}

/// The record's query half.
pub fn query_of(record: &MdarRecord) -> MultimodalQuery {
    MultimodalQuery::new(&record.id, record.image.clone(), &record.question)
}

fn steps_to_chain(
    query_id: &str,
    steps: &[MdarStep],
    final_answer: &str,
    iteration: usize,
) -> ReasoningChain {
    let steps = steps
        .iter()
        .enumerate()
        .map(|(i, s)| crate::chain::ChainStep {
            problem: SubProblem {
                index: i + 1,
                text: s.q.clone(),
                region: s.region.map(|r| Region::from_array(r).expect("validated region")),
                modality: s.modality,
            },
            answer: StepAnswer { index: i + 1, text: s.a.clone(), raw: s.a.clone() },
        })
        .collect();
    ReasoningChain {
        query_id: query_id.to_string(),
        steps,
        final_answer: final_answer.to_string(),
        iteration,
    }
}

/// The annotated gold chain, with the record's answer as the final answer.
pub fn gold_chain(record: &MdarRecord) -> ReasoningChain {
    steps_to_chain(&record.id, &record.steps, &record.answer, 0)
}

/// One annotated flawed chain. Its final answer is its own last step's
/// answer — a flawed chain does not get the gold conclusion.
pub fn erroneous_chain_of(record: &MdarRecord, index: usize) -> ReasoningChain {
    let err = &record.erroneous_chains[index];
    let final_answer = &err.steps.last().expect("validated non-empty").a;
    steps_to_chain(&record.id, &err.steps, final_answer, 0)
}

/// One contrastive pair per annotated flawed chain: gold positive, flawed
/// negative with its flaw annotation attached.
pub fn contrastive_pairs(record: &MdarRecord) -> Result<Vec<TrainingPair>, String> {
    let gold = gold_chain(record);
    record
        .erroneous_chains
        .iter()
        .enumerate()
        .map(|(i, err)| {
            TrainingPair::new(
                record.question.clone(),
                gold.clone(),
                erroneous_chain_of(record, i),
                format!("{}#{}", record.id, i),
                Some((err.flaw_step, err.flaw)),
            )
            .map_err(|e| format!("record '{}' chain {i}: {e}", record.id))
        })
        .collect()
}

/// Wraps a plain question-answer pair as a single-step textual record, so
/// text-only data can flow through the same pipeline.
pub fn adapt_text_only(
    id: impl Into<String>,
    question: impl Into<String>,
    answer: impl Into<String>,
) -> MdarRecord {
    let question = question.into();
    let answer = answer.into();
    MdarRecord {
        id: id.into(),
        image: None,
        question: question.clone(),
        steps: vec![MdarStep { q: question, modality: Modality::Textual, region: None, a: answer.clone() }],
        answer,
        erroneous_chains: Vec::new(),
        choices: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::validate_chain;

    fn base_record() -> MdarRecord {
        MdarRecord {
            id: "r1".to_string(),
            image: Some("img/r1.png".to_string()),
            question: "what is left of the mug?".to_string(),
            steps: vec![
                MdarStep {
                    q: "locate the mug".to_string(),
                    modality: Modality::Visual,
                    region: Some([0.4, 0.3, 0.2, 0.3]),
                    a: "center of the table".to_string(),
                },
                MdarStep {
                    q: "what sits immediately left of that region?".to_string(),
                    modality: Modality::CrossModal,
                    region: Some([0.15, 0.3, 0.2, 0.3]),
                    a: "a notebook".to_string(),
                },
            ],
            answer: "a notebook".to_string(),
            erroneous_chains: vec![ErroneousChain {
                steps: vec![
                    MdarStep {
                        q: "locate the mug".to_string(),
                        modality: Modality::Visual,
                        region: Some([0.4, 0.3, 0.2, 0.3]),
                        a: "center of the table".to_string(),
                    },
                    MdarStep {
                        q: "what sits immediately left of that region?".to_string(),
                        modality: Modality::CrossModal,
                        region: Some([0.15, 0.3, 0.2, 0.3]),
                        a: "a lamp".to_string(),
                    },
                ],
                flaw: FlawClass::FactualFlaw,
                flaw_step: 2,
            }],
            choices: Some(vec!["a lamp".to_string(), "a notebook".to_string()]),
        }
    }

    #[test]
    fn jsonl_roundtrip_preserves_records() {
        let records = vec![base_record(), adapt_text_only("t1", "who wrote it?", "nobody knows")];
        let raw = records_to_jsonl(&records);
        assert_eq!(raw.lines().count(), 2);
        assert!(raw.contains(r#""modality":"V""#), "modality stored as its letter");
        let load = parse_mdar(&raw, true).unwrap();
        assert_eq!(load.records, records);
        assert!(load.rejected.is_empty());
    }

    #[test]
    fn lenient_loading_collects_rejects_with_line_numbers() {
        let good = serde_json::to_string(&base_record()).unwrap();
        let mut dup = base_record();
        dup.question = "same id, different text".to_string();
        let mut bad_region = base_record();
        bad_region.id = "r2".to_string();
        bad_region.steps[0].region = Some([0.9, 0.9, 0.5, 0.5]);
        let raw = format!(
            "{good}\nnot json\n{}\n\n{}\n",
            serde_json::to_string(&dup).unwrap(),
            serde_json::to_string(&bad_region).unwrap()
        );
        let load = parse_mdar(&raw, false).unwrap();
        assert_eq!(load.records.len(), 1);
        let lines: Vec<usize> = load.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 3, 5]);
        assert!(load.rejected[1].reason.contains("duplicate id"));
        assert!(load.rejected[2].reason.contains("unit square"));
    }

    #[test]
    fn strict_loading_fails_on_the_first_bad_line() {
        let good = serde_json::to_string(&base_record()).unwrap();
        let raw = format!("{good}\n{{\"id\": \"half\"\n");
        let err = parse_mdar(&raw, true).unwrap_err();
        match err {
            DatasetError::Strict { line: 2, .. } => {}
            other => panic!("expected strict failure at line 2, got {other:?}"),
        }
    }

    #[test]
    fn record_validation_catches_annotation_mistakes() {
        let mut r = base_record();
        r.erroneous_chains[0].flaw = FlawClass::Consistent;
        assert!(validate_record(&r).unwrap_err().contains("annotated consistent"));

        let mut r = base_record();
        r.erroneous_chains[0].flaw_step = 3;
        assert!(validate_record(&r).unwrap_err().contains("flags step 3"));

        let mut r = base_record();
        r.erroneous_chains[0].steps = r.steps.clone();
        assert!(validate_record(&r).unwrap_err().contains("identical to the gold chain"));

        let mut r = base_record();
        r.answer = "a spoon".to_string();
        assert!(validate_record(&r).unwrap_err().contains("not among the choices"));

        let mut r = base_record();
        r.steps.clear();
        assert!(validate_record(&r).unwrap_err().contains("no steps"));

        let mut r = base_record();
        r.steps[1].a = "  ".to_string();
        assert!(validate_record(&r).unwrap_err().contains("empty answer"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut value = serde_json::to_value(base_record()).unwrap();
        value["surprise"] = serde_json::json!(true);
        let line = serde_json::to_string(&value).unwrap();
        let load = parse_mdar(&line, false).unwrap();
        assert!(load.records.is_empty());
        assert!(load.rejected[0].reason.contains("unreadable record"));
    }

    #[test]
    fn gold_and_erroneous_chains_are_structurally_valid() {
        let r = base_record();
        let gold = gold_chain(&r);
        assert!(validate_chain(&gold).is_ok());
        assert_eq!(gold.final_answer, "a notebook");
        assert_eq!(gold.steps[0].problem.region.unwrap().to_array(), [0.4, 0.3, 0.2, 0.3]);

        let bad = erroneous_chain_of(&r, 0);
        assert!(validate_chain(&bad).is_ok());
        assert_eq!(bad.final_answer, "a lamp", "flawed chain concludes from its own last step");
    }

    #[test]
    fn contrastive_pairs_carry_the_flaw_annotation() {
        let r = base_record();
        let pairs = contrastive_pairs(&r).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].source_id, "r1#0");
        assert_eq!(pairs[0].negative_flaw, Some((2, FlawClass::FactualFlaw)));
        assert_eq!(pairs[0].positive.final_answer, "a notebook");
        let feat = pairs[0].featurize(8).unwrap();
        assert!(feat.positive.0[2] > feat.negative.0[2]);
    }

    #[test]
    fn text_only_adapter_builds_a_single_textual_step() {
        let r = adapt_text_only("t9", "capital of peru?", "lima");
        assert!(validate_record(&r).is_ok());
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.steps[0].modality, Modality::Textual);
        assert!(r.image.is_none());
        let q = query_of(&r);
        assert_eq!(q.id, "t9");
        assert!(q.image.is_none());
    }
}
