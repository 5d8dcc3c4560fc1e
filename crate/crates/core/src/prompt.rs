//! Prompt templates and k-shot assembly under a token budget.
//!
//! Byte-level layout contracts (single spaces join all segments):
//!   TLDR, one shot:  "A1 TL;DR: S1 T TL;DR:"
//!   TLDR, zero shot: "T TL;DR:"
//!   NONE, two shots: "A1 S1 A2 S2 T "
//!   NONE, zero shot: "T "

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Tokenizer, TLDR_MARKER};
use crate::error::{Error, Result};
use crate::retrieval::TfidfIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Tldr,
    None,
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Template::Tldr => write!(f, "tldr"),
            Template::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "tldr" => Ok(Template::Tldr),
            "none" => Ok(Template::None),
            other => Err(Error::Invalid(format!("unknown template {other:?} (expected tldr|none)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ShotSelection {
    Random { seed: u64 },
    TopK,
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub template: Template,
    pub shots: usize,
    pub selection: ShotSelection,
    pub token_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub text: String,
    pub used_shot_ids: Vec<String>,
    pub truncated: bool,
}

/// Render a prompt from explicit (article, summary) shot pairs and the test
/// article. Pure string assembly; the budget logic lives in `assemble`.
pub fn render(template: Template, shots: &[(&str, &str)], test_article: &str) -> String {
    let mut segments: Vec<String> = Vec::with_capacity(shots.len() + 1);
    match template {
        Template::Tldr => {
            for (article, summary) in shots {
                segments.push(format!("{article} {TLDR_MARKER} {summary}"));
            }
            segments.push(format!("{test_article} {TLDR_MARKER}"));
        }
        Template::None => {
            for (article, summary) in shots {
                segments.push(format!("{article} {summary}"));
            }
            segments.push(format!("{test_article} "));
        }
    }
    segments.join(" ")
}

/// Select shots from the pool, render, and shrink to the token budget by
/// dropping the earliest shots first. A zero-shot prompt that still exceeds
/// the budget is an error.
pub fn assemble(
    spec: &PromptSpec,
    pool: &Corpus,
    test_article: &str,
    tokenizer: &Tokenizer,
    index: Option<&TfidfIndex>,
) -> Result<AssembledPrompt> {
    if spec.shots > 0 && pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut shots: Vec<&Document> = if spec.shots == 0 {
        Vec::new()
    } else {
        match spec.selection {
            ShotSelection::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = spec.shots.min(pool.len());
                rand::seq::index::sample(&mut rng, pool.len(), n)
                    .iter()
                    .map(|i| pool.get(i))
                    .collect()
            }
            ShotSelection::TopK => {
                let index = index
                    .ok_or_else(|| Error::Invalid("top-k shot selection requires an index".into()))?;
                index
                    .query(test_article, spec.shots)
                    .into_iter()
                    .map(|(id, _)| {
                        pool.find(&id)
                            .ok_or_else(|| Error::Invalid(format!("index entry {id:?} not in pool")))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        }
    };

    let mut truncated = false;
    loop {
        let pairs: Vec<(&str, &str)> =
            shots.iter().map(|d| (d.document.as_str(), d.summary.as_str())).collect();
        let text = render(spec.template, &pairs, test_article);
        if tokenizer.encode(&text).len() <= spec.token_budget {
            return Ok(AssembledPrompt {
                text,
                used_shot_ids: shots.iter().map(|d| d.id.clone()).collect(),
                truncated,
            });
        }
        if shots.is_empty() {
            return Err(Error::PromptBudgetExceeded);
        }
        shots.remove(0);
        truncated = true;
    }
}
