//! TF-IDF retrieval over a document pool: raw term counts, idf = ln(N/df)
//! with no smoothing, L2-normalized sparse vectors, cosine ranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

fn terms(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn term_counts(text: &str) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in terms(text) {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn l2_normalize(v: &mut BTreeMap<String, f64>) {
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.values_mut() {
            *x /= norm;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfIndex {
    doc_ids: Vec<String>,
    idf: BTreeMap<String, f64>,
    vectors: Vec<BTreeMap<String, f64>>,
}

impl TfidfIndex {
    /// Index a pool's article text (summaries are not indexed; queries are
    /// articles looking for similar articles).
    pub fn build(pool: &Corpus) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let n = pool.len() as f64;
        let per_doc: Vec<BTreeMap<String, usize>> =
            pool.iter().map(|d| term_counts(&d.document)).collect();

        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for counts in &per_doc {
            for term in counts.keys() {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let idf: BTreeMap<String, f64> =
            df.into_iter().map(|(t, d)| (t.to_string(), (n / d as f64).ln())).collect();

        let vectors = per_doc
            .iter()
            .map(|counts| {
                let mut v: BTreeMap<String, f64> = counts
                    .iter()
                    .map(|(t, &c)| (t.clone(), c as f64 * idf[t]))
                    .collect();
                l2_normalize(&mut v);
                v
            })
            .collect();

        Ok(TfidfIndex {
            doc_ids: pool.iter().map(|d| d.id.clone()).collect(),
            idf,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// Top-k most cosine-similar pool documents for a query text. Scores lie
    /// in [0,1]; ties keep pool order; k larger than the pool returns all.
    pub fn query(&self, text: &str, k: usize) -> Vec<(String, f64)> {
        let mut qv: BTreeMap<String, f64> = term_counts(text)
            .into_iter()
            .filter_map(|(t, c)| self.idf.get(&t).map(|idf| (t, c as f64 * idf)))
            .collect();
        l2_normalize(&mut qv);

        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, dv)| {
                let dot: f64 = qv
                    .iter()
                    .filter_map(|(t, &q)| dv.get(t).map(|d| q * d))
                    .sum();
                (i, dot.clamp(0.0, 1.0))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
        scored
            .into_iter()
            .take(k.min(self.doc_ids.len()))
            .map(|(i, s)| (self.doc_ids[i].clone(), s))
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
