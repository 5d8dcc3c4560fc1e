//! Command-line front end: data preparation, training, generation, evaluation,
//! and grid experiments. Every subcommand exits 0 on success and nonzero with
//! a diagnostic on stderr otherwise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use elearnfit_core::corpus::{generate_synthetic, Corpus, SyntheticTaskConfig, Tokenizer};
use elearnfit_core::eval::{corpus_mean, rouge1, RougeScore};
use elearnfit_core::harness::{
    derive_seed, read_runs_csv, run_grid, write_report, write_summary_files, CaseResult,
    ExperimentGrid, RunContext, SelectionPolicy,
};
use elearnfit_core::model::{greedy_decode, load_checkpoint, save_checkpoint, ModelConfig};
use elearnfit_core::peft::PeftMode;
use elearnfit_core::prompt::{assemble, render, PromptSpec, ShotSelection, Template};
use elearnfit_core::retrieval::TfidfIndex;
use elearnfit_core::trainer::{finetune, pretrain, TrainConfig};

#[derive(Parser)]
#[command(
    name = "elearnfit",
    version,
    about = "Few-shot prompting and parameter-efficient fine-tuning experiments \
             for a small summarization model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic key/value summarization corpus as JSONL.
    GenData(GenDataArgs),
    /// Filter a corpus by length and split it into fine-tune/test/support files.
    Prepare(PrepareArgs),
    /// Build a TF-IDF retrieval index over a corpus.
    BuildIndex(BuildIndexArgs),
    /// Train a fresh model on a corpus and save checkpoint + tokenizer.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with a parameter-efficient mode.
    Finetune(FinetuneArgs),
    /// Run one prompt through a checkpoint (debugging aid).
    Generate(GenerateArgs),
    /// Score a checkpoint on a test set with a fixed prompting setup.
    Eval(EvalArgs),
    /// Execute an experiment grid and write its report files.
    Run(RunArgs),
    /// Regenerate stats.csv and summary.txt from an existing runs.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_keys: usize,
    #[arg(long, default_value_t = 3)]
    n_facts: usize,
    #[arg(long, default_value_t = 200)]
    n_docs: usize,
    /// Size of the word pool keys and values are drawn from.
    #[arg(long, default_value_t = 20)]
    pool_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Keep documents whose article+summary word count fits this limit.
    #[arg(long, default_value_t = 100)]
    max_words: usize,
    #[arg(long)]
    n_finetune: usize,
    #[arg(long)]
    n_test: usize,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainFlags {
    fn to_config(&self, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path; a .bin suffix selects the binary format.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tokenizer_out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    max_vocab: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 64)]
    context: usize,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    train_set: PathBuf,
    /// full | layer<N> | lora<R>
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Raw prompt text, used verbatim.
    #[arg(long, conflicts_with = "article")]
    prompt: Option<String>,
    /// Article text; a zero-shot prompt is rendered from it.
    #[arg(long)]
    article: Option<String>,
    /// tldr | none (with --article)
    #[arg(long, default_value = "tldr")]
    template: String,
    #[arg(long, default_value_t = 100)]
    max_new: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Shot pool; required when --shots > 0.
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    shots: usize,
    #[arg(long, default_value = "tldr")]
    template: String,
    /// random | topk
    #[arg(long, default_value = "random")]
    selection: String,
    /// TF-IDF index over the support pool (required for topk).
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt token budget; defaults to the model context window.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 100)]
    max_new: usize,
    /// Write per-case results as JSONL.
    #[arg(long)]
    cases_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Grid config JSON; keys match the ExperimentGrid fields.
    #[arg(long)]
    config: PathBuf,
    /// Override the grid name from the config (elearn|efit|elearnfit|robustness).
    #[arg(long)]
    name: Option<String>,
    /// Already-filtered corpus to split and run on.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    n_finetune: usize,
    #[arg(long)]
    n_test: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    /// Defaults to the directory containing runs.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() {
    if let Err(err) = try_main() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn try_main() -> anyhow::Result<()> {
    init_workers()?;
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Prepare(args) => prepare(args),
        Command::BuildIndex(args) => build_index(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
    }
}

/// ELEARNFIT_WORKERS caps the rayon pool; unset means one thread per core.
fn init_workers() -> anyhow::Result<()> {
    if let Ok(raw) = std::env::var("ELEARNFIT_WORKERS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("ELEARNFIT_WORKERS={raw:?} is not a positive integer"))?;
        if n == 0 {
            bail!("ELEARNFIT_WORKERS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to configure worker pool")?;
    }
    Ok(())
}

fn load_tokenizer(path: &Path) -> anyhow::Result<Tokenizer> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading tokenizer {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn save_tokenizer(tokenizer: &Tokenizer, path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(tokenizer)?)?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let corpus = generate_synthetic(&SyntheticTaskConfig {
        n_keys: args.n_keys,
        n_facts_per_article: args.n_facts,
        n_docs: args.n_docs,
        vocab_pool: SyntheticTaskConfig::default_pool(args.pool_size),
        seed: args.seed,
    })?;
    corpus.save_jsonl(&args.out)?;
    println!("wrote {} documents to {}", corpus.len(), args.out.display());
    Ok(())
}

fn prepare(args: PrepareArgs) -> anyhow::Result<()> {
    let corpus = Corpus::load_jsonl(&args.input)?;
    let filtered = corpus.filter_by_length(args.max_words);
    let split = filtered.split(args.n_finetune, args.n_test)?;
    std::fs::create_dir_all(&args.out_dir)?;
    filtered.save_jsonl(args.out_dir.join("filtered.jsonl"))?;
    split.finetune.save_jsonl(args.out_dir.join("finetune.jsonl"))?;
    split.test.save_jsonl(args.out_dir.join("test.jsonl"))?;
    split.support_pool.save_jsonl(args.out_dir.join("support_pool.jsonl"))?;
    println!(
        "{} documents in, {} after length filter (<= {} words); finetune={} test={} support={}",
        corpus.len(),
        filtered.len(),
        args.max_words,
        split.finetune.len(),
        split.test.len(),
        split.support_pool.len()
    );
    Ok(())
}

fn build_index(args: BuildIndexArgs) -> anyhow::Result<()> {
    let pool = Corpus::load_jsonl(&args.pool)?;
    let index = TfidfIndex::build(&pool)?;
    index.save_json(&args.out)?;
    println!("indexed {} documents into {}", pool.len(), args.out.display());
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let corpus = Corpus::load_jsonl(&args.corpus)?;
    let tokenizer = Tokenizer::build(&corpus, args.max_vocab)?;
    let config = ModelConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        n_heads: args.heads,
        d_ff: args.d_ff,
        context_len: args.context,
        vocab_size: tokenizer.vocab_size(),
    };
    let tc = args.train.to_config(args.steps);
    let (params, trace) = pretrain(&config, &corpus, &tokenizer, &tc, args.steps)?;
    save_checkpoint(&params, None, &args.out)?;
    save_tokenizer(&tokenizer, &args.tokenizer_out)?;
    if let Some(path) = &args.trace_out {
        trace.write_csv(path)?;
    }
    let last = trace.rows.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "pretrained {} parameters for {} steps (final loss {:.4}); checkpoint {}, tokenizer {}",
        params.param_count(),
        args.steps,
        last,
        args.out.display(),
        args.tokenizer_out.display()
    );
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> anyhow::Result<()> {
    let (base, adapters) = load_checkpoint(&args.checkpoint)?;
    if adapters.is_some() {
        bail!("checkpoint already carries adapter factors; fine-tune from a base checkpoint");
    }
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let train_set = Corpus::load_jsonl(&args.train_set)?;
    let mode: PeftMode = args.mode.parse()?;
    let tc = args.train.to_config(args.iterations);
    let outcome = finetune(&base, &tokenizer, &train_set, &mode, &tc)?;
    save_checkpoint(&outcome.params, outcome.adapters.as_ref(), &args.out)?;
    if let Some(path) = &args.trace_out {
        outcome.trace.write_csv(path)?;
    }
    let last = outcome.trace.rows.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "fine-tuned with {} for {} iterations on {} documents ({} skipped; final loss {:.4}); wrote {}",
        mode,
        args.iterations,
        train_set.len(),
        outcome.trace.skipped_docs,
        last,
        args.out.display()
    );
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let (params, adapters) = load_checkpoint(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let text = match (&args.prompt, &args.article) {
        (Some(prompt), None) => prompt.clone(),
        (None, Some(article)) => {
            let template: Template = args.template.parse()?;
            render(template, &[], article)
        }
        _ => bail!("pass exactly one of --prompt or --article"),
    };
    let ids = tokenizer.encode(&text);
    let out = greedy_decode(&params, adapters.as_ref(), &ids, tokenizer.stop_id(), args.max_new)?;
    println!("{}", tokenizer.decode(&out)?);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (params, adapters) = load_checkpoint(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let test = Corpus::load_jsonl(&args.test)?;
    let support = match &args.support {
        Some(path) => Corpus::load_jsonl(path)?,
        None if args.shots > 0 => bail!("--shots {} needs --support", args.shots),
        None => Corpus::default(),
    };
    let template: Template = args.template.parse()?;
    let selection: SelectionPolicy = args.selection.parse()?;
    let index = match &args.index {
        Some(path) => Some(TfidfIndex::load_json(path)?),
        None => None,
    };
    if selection == SelectionPolicy::TopK && args.shots > 0 && index.is_none() {
        bail!("--selection topk needs --index");
    }
    let budget = args.budget.unwrap_or(params.config.context_len);

    let mut cases = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    for (i, doc) in test.iter().enumerate() {
        let spec = PromptSpec {
            template,
            shots: args.shots,
            selection: match selection {
                SelectionPolicy::Random => {
                    ShotSelection::Random { seed: derive_seed(args.seed, i as u64) }
                }
                SelectionPolicy::TopK => ShotSelection::TopK,
            },
            token_budget: budget,
        };
        let prompt = assemble(&spec, &support, &doc.document, &tokenizer, index.as_ref())?;
        let ids = tokenizer.encode(&prompt.text);
        let out = greedy_decode(&params, adapters.as_ref(), &ids, tokenizer.stop_id(), args.max_new)?;
        let generated = tokenizer.decode(&out)?;
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
    let mean: RougeScore = corpus_mean(&scores)?;
    if let Some(path) = &args.cases_out {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for case in &cases {
            serde_json::to_writer(&mut w, case)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    println!(
        "n={} precision={:.4} recall={:.4} f1={:.4}",
        test.len(),
        mean.precision,
        mean.recall,
        mean.f1
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut grid = ExperimentGrid::load_json(&args.config)?;
    if let Some(name) = args.name {
        grid.name = name;
    }
    let (base, adapters) = load_checkpoint(&args.checkpoint)?;
    if adapters.is_some() {
        bail!("grid runs start from a base checkpoint without adapter factors");
    }
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let corpus = Corpus::load_jsonl(&args.corpus)?;
    let split = corpus.split(args.n_finetune, args.n_test)?;
    // Indexes are cheap at this scale; build them whenever possible so top-k
    // policies work without extra flags.
    let support_index =
        if split.support_pool.is_empty() { None } else { Some(TfidfIndex::build(&split.support_pool)?) };
    let finetune_index =
        if split.finetune.is_empty() { None } else { Some(TfidfIndex::build(&split.finetune)?) };
    let ctx = RunContext {
        base: &base,
        tokenizer: &tokenizer,
        split: &split,
        support_index: support_index.as_ref(),
        finetune_index: finetune_index.as_ref(),
    };
    let records = run_grid(&grid, &ctx)?;
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("config.json"), serde_json::to_string_pretty(&grid)?)?;
    let paths = write_report(&args.out_dir, &records)?;
    println!(
        "grid {:?}: {} records over {} trials\n  {}\n  {}\n  {}\n  {}",
        grid.name,
        records.len(),
        grid.n_trials,
        paths.runs_csv.display(),
        paths.stats_csv.display(),
        paths.summary_txt.display(),
        paths.audit_jsonl.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let rows = read_runs_csv(&args.runs)?;
    let out_dir = match args.out_dir {
        Some(dir) => dir,
        None => args
            .runs
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out_dir)?;
    let (stats_csv, summary_txt) = write_summary_files(&out_dir, &rows)?;
    println!("{} rows\n  {}\n  {}", rows.len(), stats_csv.display(), summary_txt.display());
    Ok(())
}
