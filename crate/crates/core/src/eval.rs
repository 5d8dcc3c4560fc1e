//! ROUGE-1 evaluation: unigram overlap with clipped (multiset) counts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Lowercase, split on every non-alphanumeric character, drop empty pieces.
pub fn rouge_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

pub fn rouge1(candidate: &str, reference: &str) -> RougeScore {
    let cand = rouge_tokenize(candidate);
    let refr = rouge_tokenize(reference);
    if cand.is_empty() && refr.is_empty() {
        return RougeScore::default();
    }
    let cand_counts = counts(&cand);
    let ref_counts = counts(&refr);
    let overlap: usize = cand_counts
        .iter()
        .map(|(tok, &c)| c.min(ref_counts.get(tok).copied().unwrap_or(0)))
        .sum();
    let precision = if cand.is_empty() { 0.0 } else { overlap as f64 / cand.len() as f64 };
    let recall = if refr.is_empty() { 0.0 } else { overlap as f64 / refr.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

/// Arithmetic mean of each field over a non-empty slice.
pub fn corpus_mean(scores: &[RougeScore]) -> Result<RougeScore> {
    if scores.is_empty() {
        return Err(Error::Invalid("cannot average zero scores".into()));
    }
    let n = scores.len() as f64;
    Ok(RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    })
}
