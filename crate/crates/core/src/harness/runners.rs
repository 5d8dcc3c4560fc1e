//! Grid execution. Fine-tuning is hoisted into "tune units" so a model tuned
//! once per (trial, mode, train-set) serves every prompt variant evaluated
//! under it; units run in parallel and results keep unit order.

use std::time::Instant;

use rayon::prelude::*;

use crate::corpus::{Corpus, Document, SplitSet, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{corpus_mean, rouge1};
use crate::model::{greedy_decode, Parameters};
use crate::peft::{LoraAdapters, PeftMode};
use crate::prompt::{assemble, PromptSpec, ShotSelection, Template};
use crate::retrieval::TfidfIndex;
use crate::trainer::finetune;

use super::{
    derive_seed, CaseResult, ExperimentGrid, RunRecord, SelectionPolicy, MAX_NEW_TOKENS,
};

/// Seed stream reserved for drawing the fine-tuning set, distinct from the
/// per-cell prompt streams.
const TRAIN_SELECT_STREAM: u64 = 0xF17;

pub struct RunContext<'a> {
    pub base: &'a Parameters,
    pub tokenizer: &'a Tokenizer,
    pub split: &'a SplitSet,
    /// Over `split.support_pool`; required only for top-k prompt selection.
    pub support_index: Option<&'a TfidfIndex>,
    /// Over `split.finetune`; required only for top-k train-set selection.
    pub finetune_index: Option<&'a TfidfIndex>,
}

/// One fine-tuning job plus the prompt variants evaluated on its output.
struct TuneUnit {
    trial: usize,
    seed: u64,
    peft: Option<PeftMode>,
    n_train: usize,
    train_selection: SelectionPolicy,
    variants: Vec<(Template, usize, SelectionPolicy)>,
}

pub fn run_grid(grid: &ExperimentGrid, ctx: &RunContext) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    if ctx.split.test.is_empty() {
        return Err(Error::InvalidConfig("test split is empty".into()));
    }
    let units = match grid.name.as_str() {
        "elearn" => elearn_units(grid),
        "efit" => efit_units(grid, ctx),
        "elearnfit" => elearnfit_units(grid, ctx),
        "robustness" => robustness_units(grid),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown grid {other:?} (expected elearn|efit|elearnfit|robustness)"
            )))
        }
    };
    let nested: Vec<Vec<RunRecord>> = units
        .into_par_iter()
        .map(|unit| run_unit(grid, ctx, unit))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn prompt_cross(grid: &ExperimentGrid) -> Vec<(Template, usize, SelectionPolicy)> {
    let mut variants = Vec::new();
    for &template in &grid.templates {
        for &shots in &grid.shots {
            for &psel in &grid.prompt_selection {
                variants.push((template, shots, psel));
            }
        }
    }
    variants
}

fn elearn_units(grid: &ExperimentGrid) -> Vec<TuneUnit> {
    (0..grid.n_trials)
        .map(|trial| TuneUnit {
            trial,
            seed: grid.base_seed + trial as u64,
            peft: None,
            n_train: 0,
            train_selection: grid.train_selection[0],
            variants: prompt_cross(grid),
        })
        .collect()
}

fn grid_peft_modes(grid: &ExperimentGrid, ctx: &RunContext) -> Vec<PeftMode> {
    if grid.peft_modes.is_empty() {
        ExperimentGrid::default_peft_modes(ctx.base.config.n_layers)
    } else {
        grid.peft_modes.clone()
    }
}

fn efit_units(grid: &ExperimentGrid, ctx: &RunContext) -> Vec<TuneUnit> {
    // Fine-tuned models are evaluated zero-shot under each template; shot
    // selection is irrelevant at zero shots, so the first policy labels rows.
    let variants: Vec<_> = grid
        .templates
        .iter()
        .map(|&template| (template, 0, grid.prompt_selection[0]))
        .collect();
    tuned_units(grid, ctx, variants)
}

fn elearnfit_units(grid: &ExperimentGrid, ctx: &RunContext) -> Vec<TuneUnit> {
    tuned_units(grid, ctx, prompt_cross(grid))
}

fn tuned_units(
    grid: &ExperimentGrid,
    ctx: &RunContext,
    variants: Vec<(Template, usize, SelectionPolicy)>,
) -> Vec<TuneUnit> {
    let modes = grid_peft_modes(grid, ctx);
    let mut units = Vec::new();
    for trial in 0..grid.n_trials {
        for mode in &modes {
            for &n_train in &grid.n_train {
                for &tsel in &grid.train_selection {
                    units.push(TuneUnit {
                        trial,
                        seed: grid.base_seed + trial as u64,
                        peft: Some(mode.clone()),
                        n_train,
                        train_selection: tsel,
                        variants: variants.clone(),
                    });
                }
            }
        }
    }
    units
}

/// The repeated-trials protocol: a prompting-only model, two fine-tuned
/// models (first transformer block and rank-16 adapters), and both combined
/// with k-shot prompting — all under the TL;DR template with random shot
/// selection. `k` is the largest shot count in the grid and the train-set
/// size the largest `n_train`.
fn robustness_units(grid: &ExperimentGrid) -> Vec<TuneUnit> {
    let k = grid.shots.iter().copied().max().unwrap_or(4);
    let n = grid.n_train.iter().copied().max().unwrap_or(64);
    let mut units = Vec::new();
    for trial in 0..grid.n_trials {
        let seed = grid.base_seed + trial as u64;
        units.push(TuneUnit {
            trial,
            seed,
            peft: None,
            n_train: 0,
            train_selection: SelectionPolicy::Random,
            variants: vec![(Template::Tldr, k, SelectionPolicy::Random)],
        });
        for mode in [PeftMode::Layer { layer: 0 }, PeftMode::lora(16)] {
            units.push(TuneUnit {
                trial,
                seed,
                peft: Some(mode),
                n_train: n,
                train_selection: SelectionPolicy::Random,
                variants: vec![
                    (Template::Tldr, 0, SelectionPolicy::Random),
                    (Template::Tldr, k, SelectionPolicy::Random),
                ],
            });
        }
    }
    units
}

/// Pick the fine-tuning set. Random draws `n_train` documents from the
/// fine-tune split; top-k takes the `n_train` nearest neighbours of each test
/// article and unions them (first occurrence wins), so the resulting set size
/// depends on overlap.
fn select_train_docs(
    ctx: &RunContext,
    n_train: usize,
    tsel: SelectionPolicy,
    trial_seed: u64,
) -> Result<Corpus> {
    let pool = &ctx.split.finetune;
    match tsel {
        SelectionPolicy::Random => {
            use rand::SeedableRng;
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, TRAIN_SELECT_STREAM));
            let n = n_train.min(pool.len());
            let docs: Vec<Document> = rand::seq::index::sample(&mut rng, pool.len(), n)
                .iter()
                .map(|i| pool.get(i).clone())
                .collect();
            Corpus::new(docs)
        }
        SelectionPolicy::TopK => {
            let index = ctx.finetune_index.ok_or_else(|| {
                Error::Invalid("top-k train selection requires an index over the fine-tune split".into())
            })?;
            let mut seen = std::collections::HashSet::new();
            let mut docs = Vec::new();
            for test_doc in ctx.split.test.iter() {
                for (id, _) in index.query(&test_doc.document, n_train) {
                    if seen.insert(id.clone()) {
                        let doc = pool
                            .find(&id)
                            .ok_or_else(|| Error::Invalid(format!("index entry {id:?} not in fine-tune split")))?;
                        docs.push(doc.clone());
                    }
                }
            }
            Corpus::new(docs)
        }
    }
}

fn run_unit(grid: &ExperimentGrid, ctx: &RunContext, unit: TuneUnit) -> Result<Vec<RunRecord>> {
    let budget = grid.token_budget.unwrap_or(ctx.base.config.context_len);
    let (params, adapters, tune_secs) = match (&unit.peft, unit.n_train) {
        (Some(mode), n) if n > 0 => {
            let started = Instant::now();
            let train_set = select_train_docs(ctx, n, unit.train_selection, unit.seed)?;
            let mut tc = grid.train.clone();
            tc.seed = unit.seed;
            let outcome = finetune(ctx.base, ctx.tokenizer, &train_set, mode, &tc)?;
            (outcome.params, outcome.adapters, started.elapsed().as_secs_f64())
        }
        _ => (ctx.base.clone(), None, 0.0),
    };

    let mut records = Vec::with_capacity(unit.variants.len());
    for &(template, shots, psel) in &unit.variants {
        let started = Instant::now();
        let (cases, mean) =
            eval_cell(ctx, &params, adapters.as_ref(), template, shots, psel, unit.seed, budget)?;
        records.push(RunRecord {
            grid: grid.name.clone(),
            trial: unit.trial,
            seed: unit.seed,
            template,
            shots,
            prompt_selection: psel,
            peft_mode: unit.peft.clone(),
            n_train: unit.n_train,
            train_selection: unit.train_selection,
            mean,
            tune_secs,
            eval_secs: started.elapsed().as_secs_f64(),
            cases,
        });
    }
    Ok(records)
}

/// Stable stream id for a prompt cell, independent of fine-tuning axes so
/// identical prompting setups draw identical shots regardless of the model
/// being evaluated.
fn cell_code(template: Template, shots: usize, psel: SelectionPolicy) -> u64 {
    let t: u64 = match template {
        Template::Tldr => 1,
        Template::None => 2,
    };
    let p: u64 = match psel {
        SelectionPolicy::Random => 1,
        SelectionPolicy::TopK => 2,
    };
    (t << 32) ^ (p << 16) ^ shots as u64
}

#[allow(clippy::too_many_arguments)]
fn eval_cell(
    ctx: &RunContext,
    params: &Parameters,
    adapters: Option<&LoraAdapters>,
    template: Template,
    shots: usize,
    psel: SelectionPolicy,
    trial_seed: u64,
    token_budget: usize,
) -> Result<(Vec<CaseResult>, crate::eval::RougeScore)> {
    let cell_seed = derive_seed(trial_seed, cell_code(template, shots, psel));
    let mut cases = Vec::with_capacity(ctx.split.test.len());
    let mut scores = Vec::with_capacity(ctx.split.test.len());
    for (i, doc) in ctx.split.test.iter().enumerate() {
        let selection = match psel {
            SelectionPolicy::Random => {
                ShotSelection::Random { seed: derive_seed(cell_seed, i as u64) }
            }
            SelectionPolicy::TopK => ShotSelection::TopK,
        };
        let spec = PromptSpec { template, shots, selection, token_budget };
        let prompt =
            assemble(&spec, &ctx.split.support_pool, &doc.document, ctx.tokenizer, ctx.support_index)?;
        let ids = ctx.tokenizer.encode(&prompt.text);
        let out = greedy_decode(params, adapters, &ids, ctx.tokenizer.stop_id(), MAX_NEW_TOKENS)?;
        let generated = ctx.tokenizer.decode(&out)?;
        let score = rouge1(&generated, &doc.summary);
        scores.push(score);
        cases.push(CaseResult {
            test_id: doc.id.clone(),
            prompt_tokens: ids.len(),
            used_shot_ids: prompt.used_shot_ids,
            truncated: prompt.truncated,
            generated,
            score,
        });
    }
    let mean = corpus_mean(&scores)?;
    Ok((cases, mean))
}
