//! Text normalization and lexical-overlap helpers.
//!
//! Both the answer scorer and the evaluation metrics need the same notion of
//! "the same answer": lowercase, punctuation stripped, articles dropped.

use std::collections::HashSet;

/// Lowercases, maps punctuation to spaces, drops the articles a/an/the,
/// and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    normalized_tokens(s).join(" ")
}

/// Normalized token sequence; empty when nothing alphanumeric survives.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && *t != "a" && *t != "an" && *t != "the")
        .map(|t| t.to_string())
        .collect()
}

fn token_set(s: &str) -> HashSet<String> {
    normalized_tokens(s).into_iter().collect()
}

/// Jaccard similarity of the normalized token sets. Two empty sets count as
/// identical (1.0); one empty set against a non-empty one is 0.0.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let sa = token_set(a);
    let sb = token_set(b);
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// Set-based token F1 between a prediction and a gold answer.
///
/// ```text
/// precision = |common| / |pred|,  recall = |common| / |gold|
/// F1 = 2 * precision * recall / (precision + recall)
/// ```
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = token_set(prediction);
    let gold = token_set(gold);
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let common = pred.intersection(&gold).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / pred.len() as f64;
    let recall = common / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match after normalization.
pub fn answers_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}
