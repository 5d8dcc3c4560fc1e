//! Experiment harness: grids of prompting/fine-tuning cells, repeated trials,
//! per-trial statistics, and report files.

mod report;
mod runners;

pub use report::{
    read_runs_csv, stats_from_rows, write_report, write_summary_files, AuditLine, ReportPaths,
    RunRow,
};
pub use runners::{run_grid, RunContext};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RougeScore;
use crate::peft::PeftMode;
use crate::prompt::Template;
use crate::trainer::TrainConfig;

/// Generation budget per test case.
pub const MAX_NEW_TOKENS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    Random,
    TopK,
}

impl std::fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionPolicy::Random => write!(f, "random"),
            SelectionPolicy::TopK => write!(f, "topk"),
        }
    }
}

impl std::str::FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "random" => Ok(SelectionPolicy::Random),
            "topk" => Ok(SelectionPolicy::TopK),
            other => Err(Error::Invalid(format!("unknown selection {other:?} (expected random|topk)"))),
        }
    }
}

/// One experiment family and the axes it sweeps. The `name` picks the runner:
/// "elearn" (prompting only), "efit" (fine-tune, zero-shot eval), "elearnfit"
/// (fine-tune then k-shot prompting), or "robustness" (the five fixed
/// configurations rerun across trials).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub name: String,
    pub shots: Vec<usize>,
    pub templates: Vec<Template>,
    pub prompt_selection: Vec<SelectionPolicy>,
    /// Empty means "derive from the model": first/middle/last layer plus
    /// adapter ranks 4, 16, and 32.
    pub peft_modes: Vec<PeftMode>,
    pub n_train: Vec<usize>,
    pub train_selection: Vec<SelectionPolicy>,
    pub n_trials: usize,
    pub base_seed: u64,
    /// Prompt-token budget; None uses the model's context window.
    pub token_budget: Option<usize>,
    pub train: TrainConfig,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            name: "elearn".into(),
            shots: vec![0, 1, 2, 4, 8],
            templates: vec![Template::Tldr, Template::None],
            prompt_selection: vec![SelectionPolicy::Random],
            peft_modes: Vec::new(),
            n_train: vec![0, 1, 8, 64],
            train_selection: vec![SelectionPolicy::Random],
            n_trials: 5,
            base_seed: 0,
            token_budget: None,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentGrid {
    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// First/middle/last block plus the three standard adapter ranks.
    pub fn default_peft_modes(n_layers: usize) -> Vec<PeftMode> {
        let mut layers = vec![0, n_layers / 2, n_layers.saturating_sub(1)];
        layers.dedup();
        layers.sort_unstable();
        layers.dedup();
        let mut modes: Vec<PeftMode> =
            layers.into_iter().map(|layer| PeftMode::Layer { layer }).collect();
        for rank in [4, 16, 32] {
            modes.push(PeftMode::lora(rank));
        }
        modes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
        }
        if self.templates.is_empty() || self.shots.is_empty() {
            return Err(Error::InvalidConfig("templates and shots must be non-empty".into()));
        }
        if self.prompt_selection.is_empty() || self.train_selection.is_empty() {
            return Err(Error::InvalidConfig("selection policy lists must be non-empty".into()));
        }
        self.train.validate()
    }
}

/// One evaluated cell: a model variant crossed with a prompting variant, for
/// one trial. Records sharing (trial, peft_mode, n_train, train_selection)
/// share a single fine-tuning run, so `tune_secs` repeats across them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub grid: String,
    pub trial: usize,
    pub seed: u64,
    pub template: Template,
    pub shots: usize,
    pub prompt_selection: SelectionPolicy,
    pub peft_mode: Option<PeftMode>,
    pub n_train: usize,
    pub train_selection: SelectionPolicy,
    pub mean: RougeScore,
    pub tune_secs: f64,
    pub eval_secs: f64,
    pub cases: Vec<CaseResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub test_id: String,
    pub prompt_tokens: usize,
    pub used_shot_ids: Vec<String>,
    pub truncated: bool,
    pub generated: String,
    pub score: RougeScore,
}

/// Everything that identifies a configuration except the trial number.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConfigKey {
    pub grid: String,
    pub template: String,
    pub shots: usize,
    pub prompt_selection: String,
    pub peft_mode: String,
    pub n_train: usize,
    pub train_selection: String,
}

impl ConfigKey {
    pub fn label(&self) -> String {
        format!(
            "{} shots={} prompt={} peft={} n_train={} train={}",
            self.template,
            self.shots,
            self.prompt_selection,
            self.peft_mode,
            self.n_train,
            self.train_selection
        )
    }
}

impl From<&RunRecord> for ConfigKey {
    fn from(r: &RunRecord) -> Self {
        ConfigKey {
            grid: r.grid.clone(),
            template: r.template.to_string(),
            shots: r.shots,
            prompt_selection: r.prompt_selection.to_string(),
            peft_mode: r.peft_mode.as_ref().map_or("none".into(), |m| m.to_string()),
            n_train: r.n_train,
            train_selection: r.train_selection.to_string(),
        }
    }
}

/// Mean and sample standard deviation (n-1 denominator); needs at least two
/// values.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 trials for a standard deviation, found {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone)]
pub struct GroupStats {
    pub key: ConfigKey,
    pub n_trials: usize,
    pub mean_f1: f64,
    /// None when the group has a single trial.
    pub std_f1: Option<f64>,
    pub min_f1: f64,
    pub max_f1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrialStats {
    pub groups: Vec<GroupStats>,
}

/// Group per-trial mean F1 by configuration, sorted by key.
pub fn trial_stats(rows: impl IntoIterator<Item = (ConfigKey, f64)>) -> TrialStats {
    let mut grouped: std::collections::BTreeMap<ConfigKey, Vec<f64>> = Default::default();
    for (key, f1) in rows {
        grouped.entry(key).or_default().push(f1);
    }
    let groups = grouped
        .into_iter()
        .map(|(key, f1s)| {
            let n_trials = f1s.len();
            let min_f1 = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_f1 = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (mean_f1, std_f1) = match mean_std(&f1s) {
                Ok((m, s)) => (m, Some(s)),
                Err(_) => (f1s.iter().sum::<f64>() / n_trials as f64, None),
            };
            GroupStats { key, n_trials, mean_f1, std_f1, min_f1, max_f1 }
        })
        .collect();
    TrialStats { groups }
}

pub fn stats_from_records(records: &[RunRecord]) -> TrialStats {
    trial_stats(records.iter().map(|r| (ConfigKey::from(r), r.mean.f1)))
}

/// Like `stats_from_records` but insists every configuration has enough
/// trials for a standard deviation — the contract of the robustness protocol.
pub fn robustness_stats(records: &[RunRecord]) -> Result<TrialStats> {
    let stats = stats_from_records(records);
    for g in &stats.groups {
        if g.std_f1.is_none() {
            return Err(Error::Invalid(format!(
                "configuration {:?} has {} trial(s); robustness statistics need at least 2",
                g.key.label(),
                g.n_trials
            )));
        }
    }
    Ok(stats)
}

/// Stable per-(seed, stream) derivation so every cell and test case gets an
/// independent deterministic RNG stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Published LLaMa2-7b / XSum results, shipped for side-by-side orientation in
/// reports. Desk-scale models are not expected to reproduce them.
pub mod reference {
    pub struct RobustnessRow {
        pub model: &'static str,
        pub mean: f64,
        pub std: f64,
    }

    pub const ROBUSTNESS: [RobustnessRow; 5] = [
        RobustnessRow { model: "ELearn (4-shot)", mean: 0.2962, std: 0.0303 },
        RobustnessRow { model: "EFit first-layer (64 examples)", mean: 0.3465, std: 0.0039 },
        RobustnessRow { model: "EFit LoRA-16 (64 examples)", mean: 0.3274, std: 0.0029 },
        RobustnessRow { model: "ELearnFit first-layer (4-shot, 64)", mean: 0.3441, std: 0.0086 },
        RobustnessRow { model: "ELearnFit LoRA-16 (4-shot, 64)", mean: 0.3273, std: 0.0053 },
    ];

    pub struct FinetuneSamplingRow {
        pub sampling: &'static str,
        pub first_layer: f64,
        pub lora16: f64,
    }

    /// Rouge-1 x 100 by fine-tuning-set sampling strategy.
    pub const FINETUNE_SAMPLING: [FinetuneSamplingRow; 3] = [
        FinetuneSamplingRow { sampling: "random", first_layer: 36.32, lora16: 32.43 },
        FinetuneSamplingRow { sampling: "top-1", first_layer: 35.36, lora16: 36.16 },
        FinetuneSamplingRow { sampling: "top-2", first_layer: 36.62, lora16: 34.38 },
    ];
}
