//! Documents, JSONL corpora, word-level tokenization, and the synthetic
//! key/value summarization task used for desk-scale experiments.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker that separates an article from its summary in TL;DR prompts.
/// Kept as one reserved vocabulary token so encoded prompts retain it even
/// when it never occurs in corpus text.
pub const TLDR_MARKER: &str = "TL;DR:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub document: String,
    pub summary: String,
}

impl Document {
    pub fn new(id: impl Into<String>, document: impl Into<String>, summary: impl Into<String>) -> Result<Self> {
        let doc = Document { id: id.into(), document: document.into(), summary: summary.into() };
        if doc.id.is_empty() {
            return Err(Error::InvalidDocument { id: doc.id, reason: "empty id".into() });
        }
        if doc.document.trim().is_empty() {
            return Err(Error::InvalidDocument { id: doc.id, reason: "empty document text".into() });
        }
        if doc.summary.trim().is_empty() {
            return Err(Error::InvalidDocument { id: doc.id, reason: "empty summary".into() });
        }
        Ok(doc)
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Corpus { documents, by_id })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, i: usize) -> &Document {
        &self.documents[i]
    }

    pub fn find(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    /// Parse a JSONL corpus. Records need `document` and `summary`; a missing
    /// `id` is filled in as `<source-name>:<line-number>` (1-based lines).
    pub fn from_jsonl_reader(reader: impl BufRead, source_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            id: Option<String>,
            document: Option<String>,
            summary: Option<String>,
        }

        let mut documents = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: Raw = serde_json::from_str(&line)
                .map_err(|e| Error::MalformedRecord { line: line_no, msg: e.to_string() })?;
            let document = raw
                .document
                .ok_or(Error::MissingField { line: line_no, field: "document" })?;
            let summary = raw
                .summary
                .ok_or(Error::MissingField { line: line_no, field: "summary" })?;
            let id = raw.id.unwrap_or_else(|| format!("{source_name}:{line_no}"));
            documents.push(Document::new(id, document, summary)?);
        }
        Corpus::new(documents)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let file = std::fs::File::open(path)?;
        Self::from_jsonl_reader(BufReader::new(file), &name)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for d in &self.documents {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Keep documents whose article+summary word count fits the limit.
    /// Idempotent: filtering an already-filtered corpus is a no-op.
    pub fn filter_by_length(&self, max_words: usize) -> Corpus {
        let kept: Vec<Document> = self
            .documents
            .iter()
            .filter(|d| word_count(&d.document) + word_count(&d.summary) <= max_words)
            .cloned()
            .collect();
        Corpus::new(kept).expect("ids remain unique after filtering")
    }

    /// Deterministic positional split: `finetune` is the first `n_finetune`
    /// documents, `test` the next `n_test`, and `support_pool` is everything
    /// except `test` (so the fine-tune split is always inside the pool).
    pub fn split(&self, n_finetune: usize, n_test: usize) -> Result<SplitSet> {
        let required = n_finetune + n_test;
        if required > self.len() {
            return Err(Error::CorpusTooSmall { required, available: self.len() });
        }
        let finetune = self.documents[..n_finetune].to_vec();
        let test = self.documents[n_finetune..n_finetune + n_test].to_vec();
        let mut support: Vec<Document> = self.documents[..n_finetune].to_vec();
        support.extend_from_slice(&self.documents[n_finetune + n_test..]);
        Ok(SplitSet {
            finetune: Corpus::new(finetune)?,
            test: Corpus::new(test)?,
            support_pool: Corpus::new(support)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SplitSet {
    pub finetune: Corpus,
    pub test: Corpus,
    pub support_pool: Corpus,
}

/// Word-level tokenizer: lowercase, split on whitespace. The vocabulary holds
/// the `max_vocab` most frequent corpus tokens (ties broken lexicographically)
/// plus the reserved TL;DR marker, with UNK/PAD/STOP ids appended after all
/// natural tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    vocab: Vec<String>,
    map: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    vocab: Vec<String>,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        let map = r.vocab.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Tokenizer { vocab: r.vocab, map }
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr { vocab: t.vocab }
    }
}

impl Tokenizer {
    pub fn build(corpus: &Corpus, max_vocab: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyPool);
        }
        if max_vocab == 0 {
            return Err(Error::InvalidConfig("max_vocab must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for d in corpus.iter() {
            for text in [&d.document, &d.summary] {
                for w in text.to_lowercase().split_whitespace() {
                    *counts.entry(w.to_string()).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab: Vec<String> = ranked.into_iter().take(max_vocab).map(|(t, _)| t).collect();
        let marker = TLDR_MARKER.to_lowercase();
        if !vocab.contains(&marker) {
            vocab.push(marker);
        }
        let map = vocab.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Tokenizer { vocab, map })
    }

    fn n_natural(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 3
    }

    pub fn unk_id(&self) -> usize {
        self.n_natural()
    }

    pub fn pad_id(&self) -> usize {
        self.n_natural() + 1
    }

    pub fn stop_id(&self) -> usize {
        self.n_natural() + 2
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| self.map.get(w).copied().unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    /// Decode ids back to space-joined text. STOP decodes to nothing; ids past
    /// the vocabulary are an error.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < self.n_natural() {
                words.push(&self.vocab[id]);
            } else if id == self.unk_id() {
                words.push("<unk>");
            } else if id == self.pad_id() {
                words.push("<pad>");
            } else if id == self.stop_id() {
                // end-of-summary marker carries no text
            } else {
                return Err(Error::UnknownTokenId(id));
            }
        }
        Ok(words.join(" "))
    }
}

/// Configuration for the synthetic key/value recall task. Each corpus draws a
/// fixed key→value mapping from `vocab_pool` under `seed`; every article lists
/// `n_facts_per_article` facts ("key = value") and asks for one of them back
/// ("q: key"), with the summary being "key value". Two corpora that share a
/// pool but differ in seed differ (with overwhelming probability) in their
/// mapping, which is what makes fine-tuning across seeds measurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub n_keys: usize,
    pub n_facts_per_article: usize,
    pub n_docs: usize,
    pub vocab_pool: Vec<String>,
    pub seed: u64,
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keys < 2 {
            return Err(Error::InvalidConfig("n_keys must be at least 2".into()));
        }
        if self.n_facts_per_article == 0 || self.n_facts_per_article > self.n_keys {
            return Err(Error::InvalidConfig(
                "n_facts_per_article must be in 1..=n_keys".into(),
            ));
        }
        if self.n_docs == 0 {
            return Err(Error::InvalidConfig("n_docs must be at least 1".into()));
        }
        if self.vocab_pool.len() < self.n_keys + 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab_pool needs at least n_keys + 2 = {} entries, found {}",
                self.n_keys + 2,
                self.vocab_pool.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for w in &self.vocab_pool {
            if w.is_empty() || w.chars().any(char::is_whitespace) || *w != w.to_lowercase() {
                return Err(Error::InvalidConfig(format!(
                    "vocab_pool entry {w:?} must be a single lowercase word"
                )));
            }
            if !seen.insert(w) {
                return Err(Error::InvalidConfig(format!("vocab_pool entry {w:?} repeats")));
            }
        }
        // 3 words per fact + "q: <key>" + 2-word summary
        let words = 3 * self.n_facts_per_article + 4;
        if words > 100 {
            return Err(Error::InvalidConfig(format!(
                "articles would have {words} words; the length filter caps at 100"
            )));
        }
        Ok(())
    }

    /// A convenient lowercase pool: w00, w01, ...
    pub fn default_pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i:02}")).collect()
    }
}

/// Generate a synthetic corpus. Deterministic: same config (including seed)
/// yields byte-identical documents.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let keys: Vec<&str> = cfg.vocab_pool[..cfg.n_keys].iter().map(String::as_str).collect();
    let values: Vec<&str> = cfg.vocab_pool[cfg.n_keys..].iter().map(String::as_str).collect();

    // Fixed per-corpus mapping: key i -> values[perm[i mod |values|]].
    let mut perm: Vec<usize> = (0..values.len()).collect();
    perm.shuffle(&mut rng);
    let assigned: Vec<&str> = (0..cfg.n_keys).map(|i| values[perm[i % values.len()]]).collect();

    let mut documents = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let chosen = rand::seq::index::sample(&mut rng, cfg.n_keys, cfg.n_facts_per_article);
        let target = chosen.index(rng.random_range(0..cfg.n_facts_per_article));
        let facts: Vec<String> = chosen
            .iter()
            .map(|k| format!("{} = {}", keys[k], assigned[k]))
            .collect();
        let article = format!("{} q: {}", facts.join(" "), keys[target]);
        let summary = format!("{} {}", keys[target], assigned[target]);
        documents.push(Document::new(format!("syn-{}-{i:05}", cfg.seed), article, summary)?);
    }
    Corpus::new(documents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str, summary: &str) -> Document {
        Document::new(id, text, summary).unwrap()
    }

    fn sample_corpus() -> Corpus {
        Corpus::new(vec![
            doc("a", "the cat sat on the mat", "cat sat"),
            doc("b", "the dog ran far", "dog ran"),
            doc("c", "a bird flew over the cat", "bird flew"),
        ])
        .unwrap()
    }

    #[test]
    fn jsonl_round_trip_preserves_documents() {
        let corpus = sample_corpus();
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf).unwrap();
        let back = Corpus::from_jsonl_reader(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.documents(), corpus.documents());
    }

    #[test]
    fn missing_summary_reports_line_and_field() {
        let data = "{\"document\": \"x\", \"summary\": \"y\"}\n\
                    {\"document\": \"x\", \"summary\": \"y\"}\n\
                    {\"document\": \"x\"}\n";
        let err = Corpus::from_jsonl_reader(data.as_bytes(), "t.jsonl").unwrap_err();
        assert_eq!(err.to_string(), "line 3: missing field summary");
    }

    #[test]
    fn missing_id_becomes_source_and_line() {
        let data = "{\"document\": \"x\", \"summary\": \"y\"}\n";
        let c = Corpus::from_jsonl_reader(data.as_bytes(), "train.jsonl").unwrap();
        assert_eq!(c.get(0).id, "train.jsonl:1");
    }

    #[test]
    fn malformed_json_reports_line() {
        let data = "{\"document\": \"x\", \"summary\": \"y\"}\nnot json\n";
        let err = Corpus::from_jsonl_reader(data.as_bytes(), "t").unwrap_err();
        assert!(err.to_string().starts_with("line 2: malformed record"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Corpus::new(vec![doc("a", "x", "y"), doc("a", "z", "w")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(_)));
    }

    #[test]
    fn filter_by_length_keeps_short_docs_and_is_idempotent() {
        let corpus = sample_corpus();
        let filtered = corpus.filter_by_length(7);
        assert_eq!(filtered.len(), 1); // "a" and "c" have 8 combined words and drop
        let again = filtered.filter_by_length(7);
        assert_eq!(again.len(), filtered.len());
        for d in filtered.iter() {
            assert!(word_count(&d.document) + word_count(&d.summary) <= 7);
        }
    }

    #[test]
    fn split_is_positional_and_pool_excludes_test() {
        let corpus = sample_corpus();
        let s = corpus.split(1, 1).unwrap();
        assert_eq!(s.finetune.get(0).id, "a");
        assert_eq!(s.test.get(0).id, "b");
        let pool_ids: Vec<&str> = s.support_pool.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(pool_ids, ["a", "c"]);
        assert!(s.support_pool.find("b").is_none());
        // every finetune doc is also in the support pool
        for d in s.finetune.iter() {
            assert!(s.support_pool.find(&d.id).is_some());
        }
    }

    #[test]
    fn split_too_large_errors() {
        let err = sample_corpus().split(2, 2).unwrap_err();
        assert!(matches!(err, Error::CorpusTooSmall { required: 4, available: 3 }));
    }

    #[test]
    fn tokenizer_ranks_by_frequency_then_lexicographic() {
        let corpus = sample_corpus();
        let tok = Tokenizer::build(&corpus, 3).unwrap();
        // "the" x5, "cat" x3, then "sat" x2 ties with "dog"/"ran"/"bird"/"flew" -> "bird"
        assert_eq!(tok.encode("the"), vec![0]);
        assert_eq!(tok.encode("cat"), vec![1]);
        assert_eq!(tok.encode("bird"), vec![2]);
        assert_eq!(tok.encode("zebra"), vec![tok.unk_id()]);
    }

    #[test]
    fn tokenizer_specials_are_distinct_and_after_naturals() {
        let tok = Tokenizer::build(&sample_corpus(), 5).unwrap();
        let ids = [tok.unk_id(), tok.pad_id(), tok.stop_id()];
        assert_eq!(tok.vocab_size(), tok.unk_id() + 3);
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert!(ids.iter().all(|&id| id >= tok.vocab_size() - 3));
    }

    #[test]
    fn tokenizer_always_knows_the_tldr_marker() {
        let tok = Tokenizer::build(&sample_corpus(), 4).unwrap();
        let ids = tok.encode(TLDR_MARKER);
        assert_eq!(ids.len(), 1);
        assert_ne!(ids[0], tok.unk_id());
        assert_eq!(tok.decode(&ids).unwrap(), "tl;dr:");
    }

    #[test]
    fn decode_elides_stop_and_rejects_out_of_range() {
        let tok = Tokenizer::build(&sample_corpus(), 4).unwrap();
        let mut ids = tok.encode("the cat");
        ids.push(tok.stop_id());
        assert_eq!(tok.decode(&ids).unwrap(), "the cat");
        let err = tok.decode(&[tok.vocab_size()]).unwrap_err();
        assert!(matches!(err, Error::UnknownTokenId(_)));
    }

    #[test]
    fn tokenizer_serde_round_trip() {
        let tok = Tokenizer::build(&sample_corpus(), 4).unwrap();
        let s = serde_json::to_string(&tok).unwrap();
        let back: Tokenizer = serde_json::from_str(&s).unwrap();
        assert_eq!(back.vocab_size(), tok.vocab_size());
        assert_eq!(back.encode("the cat zebra"), tok.encode("the cat zebra"));
    }

    fn syn_cfg(seed: u64) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            n_keys: 6,
            n_facts_per_article: 3,
            n_docs: 40,
            vocab_pool: SyntheticTaskConfig::default_pool(16),
            seed,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = generate_synthetic(&syn_cfg(7)).unwrap();
        let b = generate_synthetic(&syn_cfg(7)).unwrap();
        assert_eq!(a.documents(), b.documents());
    }

    #[test]
    fn synthetic_articles_answer_their_own_question() {
        let corpus = generate_synthetic(&syn_cfg(3)).unwrap();
        for d in corpus.iter() {
            let words: Vec<&str> = d.document.split_whitespace().collect();
            let q = words.iter().position(|w| *w == "q:").unwrap();
            let asked = words[q + 1];
            let summary: Vec<&str> = d.summary.split_whitespace().collect();
            assert_eq!(summary[0], asked);
            // the value for the asked key appears as a fact in the article
            let fact = words
                .chunks(3)
                .take_while(|c| c.len() == 3 && c[1] == "=")
                .find(|c| c[0] == asked)
                .unwrap();
            assert_eq!(summary[1], fact[2]);
        }
    }

    #[test]
    fn synthetic_mapping_is_fixed_within_a_corpus() {
        let corpus = generate_synthetic(&syn_cfg(11)).unwrap();
        let mut seen: HashMap<String, String> = HashMap::new();
        for d in corpus.iter() {
            let words: Vec<&str> = d.document.split_whitespace().collect();
            for c in words.chunks(3).take_while(|c| c.len() == 3 && c[1] == "=") {
                let prev = seen.insert(c[0].to_string(), c[2].to_string());
                if let Some(prev) = prev {
                    assert_eq!(prev, c[2], "key {} changed value within a corpus", c[0]);
                }
            }
        }
    }

    #[test]
    fn synthetic_mapping_shifts_across_seeds() {
        let a = generate_synthetic(&syn_cfg(1)).unwrap();
        let b = generate_synthetic(&syn_cfg(2)).unwrap();
        let extract = |c: &Corpus| {
            let mut m: HashMap<String, String> = HashMap::new();
            for d in c.iter() {
                let words: Vec<&str> = d.document.split_whitespace().collect();
                for ch in words.chunks(3).take_while(|ch| ch.len() == 3 && ch[1] == "=") {
                    m.insert(ch[0].to_string(), ch[2].to_string());
                }
            }
            m
        };
        let ma = extract(&a);
        let mb = extract(&b);
        assert!(ma.iter().any(|(k, v)| mb.get(k) != Some(v)));
    }

    #[test]
    fn synthetic_config_validation_catches_bad_pools() {
        let mut cfg = syn_cfg(0);
        cfg.vocab_pool = vec!["a".into(); 16];
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = syn_cfg(0);
        cfg.vocab_pool = SyntheticTaskConfig::default_pool(7);
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = syn_cfg(0);
        cfg.n_facts_per_article = 9;
        assert!(generate_synthetic(&cfg).is_err());
    }
}
