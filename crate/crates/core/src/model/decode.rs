//! Greedy decoding: repeated argmax over next-token logits, stopping at the
//! stop token or after `max_new` tokens, sliding the context window when the
//! sequence outgrows it. No sampling anywhere — decoding is deterministic.

use crate::error::{Error, Result};
use crate::peft::LoraAdapters;

use super::forward::forward;
use super::Parameters;

/// Ties pick the lowest token id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Generate up to `max_new` tokens after `prompt`. The returned ids never
/// include `stop_id`; producing it ends generation early.
pub fn greedy_decode(
    params: &Parameters,
    adapters: Option<&LoraAdapters>,
    prompt: &[usize],
    stop_id: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    let ctx = params.config.context_len;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let window = &seq[seq.len().saturating_sub(ctx)..];
        let logits = forward(params, window, adapters)?;
        let next = argmax(logits.row(window.len() - 1));
        if next == stop_id {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 8,
            vocab_size: 12,
        }
    }

    /// A model whose blocks are pass-through (all-zero) and whose head points
    /// one output column along the shared embedding direction, so it emits
    /// that column's token forever.
    fn constant_model(favoured: usize) -> Parameters {
        let c = cfg();
        let mut p = Parameters::zeros(&c).unwrap();
        // identical, non-constant embedding for every token; zero positions
        let e: Vec<f64> = (0..c.d_model).map(|j| (j as f64) - 3.5).collect();
        for t in 0..c.vocab_size {
            p.tok_emb.row_mut(t).copy_from_slice(&e);
        }
        p.final_ln.scale.fill(1.0);
        // zero blocks leave x untouched; final LN normalizes e; align the head
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e.len() as f64;
        let inv = 1.0 / (var + crate::model::LN_EPS).sqrt();
        let mut head = Matrix::zeros(c.d_model, c.vocab_size);
        for (j, ej) in e.iter().enumerate() {
            *head.at_mut(j, favoured) = (ej - mean) * inv;
        }
        p.head = head;
        p
    }

    #[test]
    fn runs_to_the_cap_without_a_stop() {
        let p = constant_model(7);
        let out = greedy_decode(&p, None, &[1], 11, 5).unwrap();
        assert_eq!(out, vec![7; 5]);
    }

    #[test]
    fn stop_token_ends_generation_and_is_excluded() {
        let stop = 11;
        let p = constant_model(stop);
        let out = greedy_decode(&p, None, &[1, 2], stop, 100).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn ties_pick_the_lowest_id() {
        // all-zero model: every logit is identical
        let p = Parameters::zeros(&cfg()).unwrap();
        let out = greedy_decode(&p, None, &[3], 11, 3).unwrap();
        assert_eq!(out, vec![0, 0, 0]);
    }

    #[test]
    fn window_slides_when_prompt_exceeds_context() {
        let p = Parameters::init(&cfg(), 13).unwrap();
        let long: Vec<usize> = (0..11).map(|i| i % 12).collect();
        let full = greedy_decode(&p, None, &long, 11, 1).unwrap();
        let trimmed = greedy_decode(&p, None, &long[long.len() - 8..], 11, 1).unwrap();
        assert_eq!(full, trimmed);
    }

    #[test]
    fn empty_prompt_is_an_error() {
        let p = Parameters::zeros(&cfg()).unwrap();
        assert!(greedy_decode(&p, None, &[], 11, 4).is_err());
    }

    #[test]
    fn zero_budget_returns_nothing() {
        let p = constant_model(7);
        assert_eq!(greedy_decode(&p, None, &[1], 11, 0).unwrap(), Vec::<usize>::new());
    }
}
