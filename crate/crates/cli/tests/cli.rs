//! End-to-end checks of the command-line interface via the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_elearnfit")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("elearnfit-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn CLI")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("error"), "no diagnostic on stderr: {stderr:?}");
    stderr
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_runs() {
    let dir = workdir("pipeline");

    let stdout = ok(&[
        "gen-data", "--out", &p(&dir, "corpus.jsonl"), "--n-docs", "40", "--seed", "3",
    ]);
    assert!(stdout.contains("wrote 40 documents"));

    let stdout = ok(&[
        "prepare",
        "--input", &p(&dir, "corpus.jsonl"),
        "--out-dir", &p(&dir, "data"),
        "--max-words", "100",
        "--n-finetune", "12",
        "--n-test", "4",
    ]);
    assert!(stdout.contains("finetune=12 test=4 support=36"));

    ok(&[
        "build-index",
        "--pool", &p(&dir, "data/support_pool.jsonl"),
        "--out", &p(&dir, "support.idx.json"),
    ]);

    ok(&[
        "pretrain",
        "--corpus", &p(&dir, "data/filtered.jsonl"),
        "--out", &p(&dir, "base.ckpt.bin"),
        "--tokenizer-out", &p(&dir, "tok.json"),
        "--steps", "5",
        "--layers", "1",
        "--d-model", "16",
        "--heads", "2",
        "--d-ff", "32",
        "--context", "64",
        "--trace-out", &p(&dir, "trace.csv"),
    ]);
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss,grad_norm"));
    assert_eq!(trace.lines().count(), 6);

    ok(&[
        "finetune",
        "--checkpoint", &p(&dir, "base.ckpt.bin"),
        "--tokenizer", &p(&dir, "tok.json"),
        "--train-set", &p(&dir, "data/finetune.jsonl"),
        "--mode", "lora4",
        "--out", &p(&dir, "tuned.ckpt.json"),
        "--iterations", "2",
    ]);

    // A LoRA checkpoint cannot seed another fine-tune run.
    fails(&[
        "finetune",
        "--checkpoint", &p(&dir, "tuned.ckpt.json"),
        "--tokenizer", &p(&dir, "tok.json"),
        "--train-set", &p(&dir, "data/finetune.jsonl"),
        "--mode", "layer0",
        "--out", &p(&dir, "twice.ckpt.json"),
    ]);

    let generated = ok(&[
        "generate",
        "--checkpoint", &p(&dir, "tuned.ckpt.json"),
        "--tokenizer", &p(&dir, "tok.json"),
        "--article", "w01 = w05 q: w01",
        "--max-new", "8",
    ]);
    assert!(generated.split_whitespace().count() <= 8);

    let scored = ok(&[
        "eval",
        "--checkpoint", &p(&dir, "tuned.ckpt.json"),
        "--tokenizer", &p(&dir, "tok.json"),
        "--test", &p(&dir, "data/test.jsonl"),
        "--support", &p(&dir, "data/support_pool.jsonl"),
        "--shots", "1",
        "--selection", "topk",
        "--index", &p(&dir, "support.idx.json"),
        "--cases-out", &p(&dir, "cases.jsonl"),
    ]);
    assert!(scored.starts_with("n=4 precision="));
    let cases = std::fs::read_to_string(dir.join("cases.jsonl")).unwrap();
    assert_eq!(cases.lines().count(), 4);

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn grid_run_and_report_regeneration() {
    let dir = workdir("grid");

    ok(&["gen-data", "--out", &p(&dir, "corpus.jsonl"), "--n-docs", "30", "--seed", "9"]);
    ok(&[
        "pretrain",
        "--corpus", &p(&dir, "corpus.jsonl"),
        "--out", &p(&dir, "base.ckpt.bin"),
        "--tokenizer-out", &p(&dir, "tok.json"),
        "--steps", "4",
        "--layers", "1",
        "--d-model", "16",
        "--heads", "2",
        "--d-ff", "32",
    ]);

    std::fs::write(
        dir.join("grid.json"),
        r#"{
            "name": "elearn",
            "shots": [0, 1],
            "templates": ["tldr"],
            "n_trials": 2,
            "base_seed": 21,
            "train": {"iterations": 1, "batch_size": 2}
        }"#,
    )
    .unwrap();

    let stdout = ok(&[
        "run",
        "--config", &p(&dir, "grid.json"),
        "--corpus", &p(&dir, "corpus.jsonl"),
        "--checkpoint", &p(&dir, "base.ckpt.bin"),
        "--tokenizer", &p(&dir, "tok.json"),
        "--n-finetune", "8",
        "--n-test", "3",
        "--out-dir", &p(&dir, "out"),
    ]);
    assert!(stdout.contains("4 records over 2 trials"), "stdout: {stdout}");

    let runs = std::fs::read_to_string(dir.join("out/runs.csv")).unwrap();
    assert!(runs.starts_with("grid,trial,seed,template,shots,"));
    assert_eq!(runs.lines().count(), 5, "header plus 2 trials x 2 shot counts");
    // One audit line per (cell, test document).
    let audit = std::fs::read_to_string(dir.join("out/audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 4 * 3);
    assert!(dir.join("out/config.json").exists());

    ok(&[
        "report",
        "--runs", &p(&dir, "out/runs.csv"),
        "--out-dir", &p(&dir, "out2"),
    ]);
    let original = std::fs::read_to_string(dir.join("out/summary.txt")).unwrap();
    let regenerated = std::fs::read_to_string(dir.join("out2/summary.txt")).unwrap();
    assert_eq!(original, regenerated, "report regeneration must be lossless");

    // Same run under a single-worker pool is bit-identical.
    let out = Command::new(bin())
        .env("ELEARNFIT_WORKERS", "1")
        .args([
            "run",
            "--config", &p(&dir, "grid.json"),
            "--corpus", &p(&dir, "corpus.jsonl"),
            "--checkpoint", &p(&dir, "base.ckpt.bin"),
            "--tokenizer", &p(&dir, "tok.json"),
            "--n-finetune", "8",
            "--n-test", "3",
            "--out-dir", &p(&dir, "out3"),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let serial = std::fs::read_to_string(dir.join("out3/runs.csv")).unwrap();
    // Strip the wall-clock columns (tune_secs, eval_secs); everything else is
    // deterministic regardless of worker count.
    let strip = |text: &str| -> Vec<Vec<String>> {
        text.lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| *i != 12 && *i != 13)
                    .map(|(_, f)| f.to_string())
                    .collect()
            })
            .collect()
    };
    assert_eq!(strip(&runs), strip(&serial), "worker count must not change results");

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn diagnostics_and_exit_codes() {
    let dir = workdir("diag");
    ok(&["gen-data", "--out", &p(&dir, "c.jsonl"), "--n-docs", "12", "--seed", "1"]);
    ok(&[
        "pretrain",
        "--corpus", &p(&dir, "c.jsonl"),
        "--out", &p(&dir, "m.ckpt.json"),
        "--tokenizer-out", &p(&dir, "t.json"),
        "--steps", "2",
        "--layers", "1",
        "--d-model", "16",
        "--heads", "2",
        "--d-ff", "32",
    ]);

    // Shots without a support pool.
    let stderr = fails(&[
        "eval",
        "--checkpoint", &p(&dir, "m.ckpt.json"),
        "--tokenizer", &p(&dir, "t.json"),
        "--test", &p(&dir, "c.jsonl"),
        "--shots", "2",
    ]);
    assert!(stderr.contains("--support"));

    // Top-k selection without an index.
    fails(&[
        "eval",
        "--checkpoint", &p(&dir, "m.ckpt.json"),
        "--tokenizer", &p(&dir, "t.json"),
        "--test", &p(&dir, "c.jsonl"),
        "--support", &p(&dir, "c.jsonl"),
        "--shots", "1",
        "--selection", "topk",
    ]);

    // Missing file surfaces as a diagnostic, not a panic.
    fails(&[
        "eval",
        "--checkpoint", &p(&dir, "absent.ckpt"),
        "--tokenizer", &p(&dir, "t.json"),
        "--test", &p(&dir, "c.jsonl"),
    ]);

    // Invalid worker-count env var.
    let out = Command::new(bin())
        .env("ELEARNFIT_WORKERS", "many")
        .args(["gen-data", "--out", &p(&dir, "x.jsonl")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ELEARNFIT_WORKERS"));

    std::fs::remove_dir_all(&dir).unwrap();
}
