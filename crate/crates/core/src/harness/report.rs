//! Report files for a grid run: `runs.csv` (one row per evaluated cell),
//! `stats.csv` and `summary.txt` (per-configuration statistics across trials),
//! and `audit.jsonl` (full per-case detail). Statistics are always recomputed
//! from the flat rows, so a summary regenerated from `runs.csv` matches the
//! one written at run time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{reference, CaseResult, ConfigKey, RunRecord, TrialStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub grid: String,
    pub trial: usize,
    pub seed: u64,
    pub template: String,
    pub shots: usize,
    pub prompt_selection: String,
    pub peft_mode: String,
    pub n_train: usize,
    pub train_selection: String,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub tune_secs: f64,
    pub eval_secs: f64,
    pub n_cases: usize,
    pub truncated_cases: usize,
}

impl From<&RunRecord> for RunRow {
    fn from(r: &RunRecord) -> Self {
        RunRow {
            grid: r.grid.clone(),
            trial: r.trial,
            seed: r.seed,
            template: r.template.to_string(),
            shots: r.shots,
            prompt_selection: r.prompt_selection.to_string(),
            peft_mode: r.peft_mode.as_ref().map_or("none".into(), |m| m.to_string()),
            n_train: r.n_train,
            train_selection: r.train_selection.to_string(),
            mean_precision: r.mean.precision,
            mean_recall: r.mean.recall,
            mean_f1: r.mean.f1,
            tune_secs: r.tune_secs,
            eval_secs: r.eval_secs,
            n_cases: r.cases.len(),
            truncated_cases: r.cases.iter().filter(|c| c.truncated).count(),
        }
    }
}

impl RunRow {
    pub fn key(&self) -> ConfigKey {
        ConfigKey {
            grid: self.grid.clone(),
            template: self.template.clone(),
            shots: self.shots,
            prompt_selection: self.prompt_selection.clone(),
            peft_mode: self.peft_mode.clone(),
            n_train: self.n_train,
            train_selection: self.train_selection.clone(),
        }
    }
}

pub fn stats_from_rows(rows: &[RunRow]) -> TrialStats {
    super::trial_stats(rows.iter().map(|r| (r.key(), r.mean_f1)))
}

/// One audit line per decoded test case, so the audit file always holds
/// |test set| x (cells executed) lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditLine {
    pub grid: String,
    pub trial: usize,
    pub seed: u64,
    pub template: String,
    pub shots: usize,
    pub prompt_selection: String,
    pub peft_mode: String,
    pub n_train: usize,
    pub train_selection: String,
    #[serde(flatten)]
    pub case: CaseResult,
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub runs_csv: PathBuf,
    pub stats_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub audit_jsonl: PathBuf,
}

#[derive(Serialize)]
struct StatsRow<'a> {
    grid: &'a str,
    template: &'a str,
    shots: usize,
    prompt_selection: &'a str,
    peft_mode: &'a str,
    n_train: usize,
    train_selection: &'a str,
    n_trials: usize,
    mean_f1: f64,
    std_f1: Option<f64>,
    min_f1: f64,
    max_f1: f64,
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn write_runs_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_stats_csv(path: &Path, stats: &TrialStats) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for g in &stats.groups {
        writer.serialize(StatsRow {
            grid: &g.key.grid,
            template: &g.key.template,
            shots: g.key.shots,
            prompt_selection: &g.key.prompt_selection,
            peft_mode: &g.key.peft_mode,
            n_train: g.key.n_train,
            train_selection: &g.key.train_selection,
            n_trials: g.n_trials,
            mean_f1: g.mean_f1,
            std_f1: g.std_f1,
            min_f1: g.min_f1,
            max_f1: g.max_f1,
        })?;
    }
    writer.flush()?;
    Ok(())
}

fn summary_text(rows: &[RunRow], stats: &TrialStats) -> String {
    use std::fmt::Write;

    let mut grids: Vec<&str> = rows.iter().map(|r| r.grid.as_str()).collect();
    grids.sort_unstable();
    grids.dedup();
    let trials = rows.iter().map(|r| r.trial).max().map_or(0, |t| t + 1);

    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", grids.join(", "));
    let _ = writeln!(out, "rows: {}  trials: {}", rows.len(), trials);
    let _ = writeln!(out);

    let width = stats.groups.iter().map(|g| g.key.label().len()).max().unwrap_or(13).max(13);
    let _ = writeln!(
        out,
        "{:<width$}  {:>3}  {:>8}  {:>8}  {:>8}  {:>8}",
        "configuration", "n", "mean_f1", "std_f1", "min_f1", "max_f1"
    );
    for g in &stats.groups {
        let std = g.std_f1.map_or("       -".into(), |s| format!("{s:>8.4}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>3}  {:>8.4}  {}  {:>8.4}  {:>8.4}",
            g.key.label(),
            g.n_trials,
            g.mean_f1,
            std,
            g.min_f1,
            g.max_f1
        );
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "reference: published LLaMa2-7b / XSum results, for orientation only");
    let _ = writeln!(out, "  repeated-trials protocol (mean / std of Rouge-1 F1 over five trials):");
    for r in &reference::ROBUSTNESS {
        let _ = writeln!(out, "    {:<38} {:.4} / {:.4}", r.model, r.mean, r.std);
    }
    let _ = writeln!(out, "  fine-tuning-set sampling (Rouge-1 x 100, first-layer / LoRA-16):");
    for r in &reference::FINETUNE_SAMPLING {
        let _ = writeln!(out, "    {:<8} {:.2} / {:.2}", r.sampling, r.first_layer, r.lora16);
    }
    out
}

/// Write `stats.csv` and `summary.txt` computed from flat rows. Used both at
/// run time and when regenerating reports from an existing `runs.csv`.
pub fn write_summary_files(dir: &Path, rows: &[RunRow]) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Invalid("no run rows to report".into()));
    }
    let stats = stats_from_rows(rows);
    let stats_csv = dir.join("stats.csv");
    write_stats_csv(&stats_csv, &stats)?;
    let summary_txt = dir.join("summary.txt");
    std::fs::write(&summary_txt, summary_text(rows, &stats))?;
    Ok((stats_csv, summary_txt))
}

/// Write the full report set for a finished run.
pub fn write_report(dir: impl AsRef<Path>, records: &[RunRecord]) -> Result<ReportPaths> {
    let dir = dir.as_ref();
    if records.is_empty() {
        return Err(Error::Invalid("no run records to report".into()));
    }
    std::fs::create_dir_all(dir)?;

    let rows: Vec<RunRow> = records.iter().map(RunRow::from).collect();
    let runs_csv = dir.join("runs.csv");
    write_runs_csv(&runs_csv, &rows)?;

    let audit_jsonl = dir.join("audit.jsonl");
    {
        use std::io::Write;
        let file = std::fs::File::create(&audit_jsonl)?;
        let mut w = std::io::BufWriter::new(file);
        for record in records {
            for case in &record.cases {
                let line = AuditLine {
                    grid: record.grid.clone(),
                    trial: record.trial,
                    seed: record.seed,
                    template: record.template.to_string(),
                    shots: record.shots,
                    prompt_selection: record.prompt_selection.to_string(),
                    peft_mode: record.peft_mode.as_ref().map_or("none".into(), |m| m.to_string()),
                    n_train: record.n_train,
                    train_selection: record.train_selection.to_string(),
                    case: case.clone(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }

    let (stats_csv, summary_txt) = write_summary_files(dir, &rows)?;
    Ok(ReportPaths { runs_csv, stats_csv, summary_txt, audit_jsonl })
}
