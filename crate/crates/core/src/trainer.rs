//! Training: batch sampling without replacement, Adam with decoupled weight
//! decay and global-norm clipping, pretraining from scratch, and fine-tuning
//! under a trainable mask. Loss is mean cross-entropy over summary and stop
//! positions only; every example is laid out as "{article} TL;DR: {summary}".

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Tokenizer, TLDR_MARKER};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{loss_and_grad, GradientSet, LossMask, ModelConfig, Parameters};
use crate::peft::{attach_lora, trainable_mask, LoraAdapters, PeftMode, TrainableMask};

fn default_iterations() -> usize {
    10
}
fn default_batch_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_grad_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: default_iterations(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            grad_clip: default_grad_clip(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        for (b, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::InvalidConfig("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uniform sampling without replacement; when the pool runs out mid-draw the
/// deck reshuffles and drawing continues (so draws larger than the pool are
/// allowed and simply wrap).
#[derive(Debug, Clone)]
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyPool);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Sampler { order, pos: 0, rng })
    }

    pub fn draw(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Token sequence "{article} TL;DR: {summary}" plus the stop token, and the
/// index where the summary begins (= first scored prediction target).
pub fn encode_training_example(doc: &Document, tokenizer: &Tokenizer) -> (Vec<usize>, usize) {
    let prefix = format!("{} {TLDR_MARKER}", doc.document);
    let mut seq = tokenizer.encode(&prefix);
    let boundary = seq.len();
    seq.extend(tokenizer.encode(&doc.summary));
    seq.push(tokenizer.stop_id());
    (seq, boundary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Documents dropped because they exceed the context window (fine-tuning
    /// only; pretraining refuses such corpora outright).
    pub skipped_docs: usize,
}

impl TrainTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "grad_norm"])?;
        for r in &self.rows {
            w.write_record([r.step.to_string(), r.loss.to_string(), r.grad_norm.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<TrainTrace> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        Ok(TrainTrace { rows, skipped_docs: 0 })
    }
}

/// Adam moments keyed by tensor name, lazily created.
struct Adam {
    step: usize,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    fn new() -> Self {
        Adam { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn update(
        &mut self,
        params: &mut Parameters,
        mut adapters: Option<&mut LoraAdapters>,
        grads: &GradientSet,
        mask: &TrainableMask,
        tc: &TrainConfig,
    ) {
        self.step += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.step as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.step as i32);
        for name in mask.iter() {
            let g = grads.get(name).expect("trainable tensor has a gradient");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let param = if name.contains(".lora.") {
                adapters
                    .as_deref_mut()
                    .expect("adapter tensor requires adapters")
                    .tensor_mut(name)
                    .unwrap()
            } else {
                params.tensor_mut(name).unwrap()
            };
            let (md, vd, gd, pd) = (m.data_mut(), v.data_mut(), g.data(), param.data_mut());
            for i in 0..gd.len() {
                md[i] = tc.beta1 * md[i] + (1.0 - tc.beta1) * gd[i];
                vd[i] = tc.beta2 * vd[i] + (1.0 - tc.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= tc.learning_rate * (mhat / (vhat.sqrt() + tc.eps) + tc.weight_decay * pd[i]);
            }
        }
    }
}

fn train_loop(
    params: &mut Parameters,
    mut adapters: Option<&mut LoraAdapters>,
    examples: &[(Vec<usize>, usize)],
    trainable: &TrainableMask,
    tc: &TrainConfig,
    steps: usize,
) -> Result<Vec<TraceRow>> {
    let mut sampler = Sampler::new(examples.len(), tc.seed)?;
    let mut adam = Adam::new();
    let mut rows = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = sampler.draw(tc.batch_size);
        let mut total_loss = 0.0;
        let mut acc: Option<GradientSet> = None;
        for &i in &batch {
            let (seq, boundary) = &examples[i];
            let tokens = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let mask = LossMask::suffix_from(tokens.len(), boundary - 1);
            let (loss, g) =
                loss_and_grad(params, tokens, targets, &mask, adapters.as_deref(), Some(trainable))?;
            total_loss += loss;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.add_assign(&g),
            }
        }
        let mut g = acc.expect("batch_size is validated positive");
        g.scale(1.0 / batch.len() as f64);
        let mut grad_norm = g.global_norm(trainable);
        if tc.grad_clip > 0.0 && grad_norm > tc.grad_clip {
            g.scale(tc.grad_clip / grad_norm);
            grad_norm = tc.grad_clip;
        }
        adam.update(params, adapters.as_deref_mut(), &g, trainable, tc);
        rows.push(TraceRow { step, loss: total_loss / batch.len() as f64, grad_norm });
    }
    Ok(rows)
}

/// Token sequence plus the index where the summary (scored) region begins.
type TrainingExample = (Vec<usize>, usize);

fn encode_corpus(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    ctx: usize,
    strict: bool,
) -> Result<(Vec<TrainingExample>, usize)> {
    let mut examples = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for doc in corpus.iter() {
        let (seq, boundary) = encode_training_example(doc, tokenizer);
        if seq.len() - 1 > ctx {
            if strict {
                return Err(Error::DocumentTooLong { id: doc.id.clone(), len: seq.len() - 1, ctx });
            }
            skipped += 1;
            continue;
        }
        examples.push((seq, boundary));
    }
    Ok((examples, skipped))
}

/// Train a fresh model (Gaussian init under `tc.seed`) for `steps` optimizer
/// steps. Any document that cannot fit the context window is an error.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    tc: &TrainConfig,
    steps: usize,
) -> Result<(Parameters, TrainTrace)> {
    config.validate()?;
    tc.validate()?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer vocabulary ({}) does not match model vocab_size ({})",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let (examples, _) = encode_corpus(corpus, tokenizer, config.context_len, true)?;
    if examples.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut params = Parameters::init(config, tc.seed)?;
    let full = trainable_mask(&PeftMode::Full, config)?;
    let rows = train_loop(&mut params, None, &examples, &full, tc, steps)?;
    Ok((params, TrainTrace { rows, skipped_docs: 0 }))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: Parameters,
    pub adapters: Option<LoraAdapters>,
    pub trace: TrainTrace,
}

/// Fine-tune a copy of `base` for `tc.iterations` steps with only the mode's
/// tensors unfrozen. Oversized documents are skipped (and counted); skipping
/// everything is an error.
pub fn finetune(
    base: &Parameters,
    tokenizer: &Tokenizer,
    train_set: &Corpus,
    mode: &PeftMode,
    tc: &TrainConfig,
) -> Result<FinetuneOutcome> {
    tc.validate()?;
    mode.validate(&base.config)?;
    let (examples, skipped) = encode_corpus(train_set, tokenizer, base.config.context_len, false)?;
    if examples.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut params = base.clone();
    let mut adapters = match mode {
        PeftMode::Lora { rank, targets } => Some(attach_lora(&params, *rank, targets, tc.seed)?),
        _ => None,
    };
    let trainable = trainable_mask(mode, &base.config)?;
    let rows = train_loop(&mut params, adapters.as_mut(), &examples, &trainable, tc, tc.iterations)?;
    Ok(FinetuneOutcome { params, adapters, trace: TrainTrace { rows, skipped_docs: skipped } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticTaskConfig};

    fn syn(seed: u64, n_docs: usize) -> Corpus {
        generate_synthetic(&SyntheticTaskConfig {
            n_keys: 4,
            n_facts_per_article: 2,
            n_docs,
            vocab_pool: SyntheticTaskConfig::default_pool(10),
            seed,
        })
        .unwrap()
    }

    fn small_model() -> (ModelConfig, Tokenizer, Corpus) {
        let corpus = syn(1, 24);
        let tok = Tokenizer::build(&corpus, 64).unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_len: 24,
            vocab_size: tok.vocab_size(),
        };
        (cfg, tok, corpus)
    }

    #[test]
    fn sampler_draws_without_replacement_until_exhausted() {
        let mut s = Sampler::new(10, 7).unwrap();
        let first = s.draw(8);
        let mut uniq = first.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        let second = s.draw(8);
        // the first two of the second draw finish the epoch
        let mut epoch: Vec<usize> = first.iter().chain(&second[..2]).copied().collect();
        epoch.sort_unstable();
        assert_eq!(epoch, (0..10).collect::<Vec<_>>());
        // identical seeds replay identical draws
        let mut s2 = Sampler::new(10, 7).unwrap();
        assert_eq!(s2.draw(8), first);
        assert!(Sampler::new(0, 0).is_err());
    }

    #[test]
    fn training_example_layout_and_boundary() {
        let (_, tok, _) = small_model();
        let doc = Document::new("x", "w00 = w05 q: w00", "w00 w05").unwrap();
        let (seq, boundary) = encode_training_example(&doc, &tok);
        let prefix = tok.encode(&format!("{} {}", doc.document, TLDR_MARKER));
        assert_eq!(&seq[..boundary], &prefix[..]);
        assert_eq!(seq[seq.len() - 1], tok.stop_id());
        assert_eq!(seq.len(), boundary + 3); // two summary words + stop
        // the loss mask starts exactly at the first summary prediction
        let mask = LossMask::suffix_from(seq.len() - 1, boundary - 1);
        assert_eq!(mask.count(), 3);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let (cfg, tok, corpus) = small_model();
        let tc = TrainConfig { seed: 3, ..TrainConfig::default() };
        let (params, trace) = pretrain(&cfg, &corpus, &tok, &tc, 30).unwrap();
        assert_eq!(trace.rows.len(), 30);
        let first = trace.rows.first().unwrap().loss;
        let last = trace.rows.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
        assert!(trace.rows.iter().all(|r| r.grad_norm <= tc.grad_clip + 1e-12));

        let (params2, _) = pretrain(&cfg, &corpus, &tok, &tc, 30).unwrap();
        assert!(params.bits_eq(&params2));
    }

    #[test]
    fn pretrain_rejects_oversized_documents() {
        let (cfg, tok, _) = small_model();
        let long = "w00 ".repeat(40);
        let corpus = Corpus::new(vec![Document::new("big", long, "w00").unwrap()]).unwrap();
        let err = pretrain(&cfg, &corpus, &tok, &TrainConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::DocumentTooLong { .. }));
    }

    #[test]
    fn pretrain_rejects_vocab_mismatch() {
        let (mut cfg, tok, corpus) = small_model();
        cfg.vocab_size = tok.vocab_size() + 1;
        assert!(pretrain(&cfg, &corpus, &tok, &TrainConfig::default(), 1).is_err());
    }

    #[test]
    fn layer_finetune_freezes_everything_else() {
        let (cfg, tok, corpus) = small_model();
        let base = Parameters::init(&cfg, 5).unwrap();
        let out = finetune(&base, &tok, &corpus, &PeftMode::Layer { layer: 0 }, &TrainConfig::default())
            .unwrap();
        assert!(out.adapters.is_none());
        for name in base.tensor_names() {
            let same = out.params.tensor(&name).unwrap().bits_eq(base.tensor(&name).unwrap());
            if name.starts_with("block0.") {
                assert!(!same, "{name} should have moved");
            } else {
                assert!(same, "{name} should be frozen");
            }
        }
    }

    #[test]
    fn lora_finetune_touches_only_adapters() {
        let (cfg, tok, corpus) = small_model();
        let base = Parameters::init(&cfg, 6).unwrap();
        let out = finetune(&base, &tok, &corpus, &PeftMode::lora(2), &TrainConfig::default()).unwrap();
        for name in base.tensor_names() {
            assert!(
                out.params.tensor(&name).unwrap().bits_eq(base.tensor(&name).unwrap()),
                "{name} should be frozen under adapters"
            );
        }
        let ad = out.adapters.unwrap();
        assert!(ad.entries.values().any(|f| f.b.sq_sum() > 0.0), "B factors should move");
    }

    #[test]
    fn finetune_skips_oversized_documents_and_counts_them() {
        let (cfg, tok, corpus) = small_model();
        let base = Parameters::init(&cfg, 1).unwrap();
        let mut docs = corpus.documents().to_vec();
        docs.push(Document::new("big", "w00 ".repeat(40), "w00").unwrap());
        let with_big = Corpus::new(docs).unwrap();
        let out = finetune(&base, &tok, &with_big, &PeftMode::Layer { layer: 0 }, &TrainConfig::default())
            .unwrap();
        assert_eq!(out.trace.skipped_docs, 1);

        let only_big =
            Corpus::new(vec![Document::new("big", "w00 ".repeat(40), "w00").unwrap()]).unwrap();
        let err =
            finetune(&base, &tok, &only_big, &PeftMode::Full, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyPool));
    }

    #[test]
    fn first_adam_step_is_bounded_by_the_learning_rate() {
        let (cfg, tok, corpus) = small_model();
        let base = Parameters::init(&cfg, 9).unwrap();
        let tc = TrainConfig { iterations: 1, grad_clip: 0.0, ..TrainConfig::default() };
        let out = finetune(&base, &tok, &corpus, &PeftMode::Full, &tc).unwrap();
        let mut max_delta: f64 = 0.0;
        for name in base.tensor_names() {
            let d = out.params.tensor(&name).unwrap().max_abs_diff(base.tensor(&name).unwrap());
            max_delta = max_delta.max(d);
        }
        assert!(max_delta <= tc.learning_rate * (1.0 + 1e-9), "step {max_delta}");
        assert!(max_delta > 0.5 * tc.learning_rate);
    }

    #[test]
    fn trace_csv_round_trips() {
        let trace = TrainTrace {
            rows: vec![
                TraceRow { step: 1, loss: 3.25, grad_norm: 1.0 },
                TraceRow { step: 2, loss: 2.5, grad_norm: 0.75 },
            ],
            skipped_docs: 0,
        };
        let path = std::env::temp_dir().join(format!("trace-{}.csv", std::process::id()));
        trace.write_csv(&path).unwrap();
        let back = TrainTrace::read_csv(&path).unwrap();
        assert_eq!(back.rows, trace.rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss,grad_norm\n"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn train_config_validation() {
        let tc = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(tc.validate().is_err());
        let tc = TrainConfig { beta2: 1.0, ..TrainConfig::default() };
        assert!(tc.validate().is_err());
        let tc = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(tc.validate().is_err());
    }
}
