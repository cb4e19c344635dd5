use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nlft(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlft"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = nlft(args, cwd);
    assert!(
        out.status.success(),
        "nlft {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "[model]\nkind = \"tabular\"\ninit_std = 0.1\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(&["gen-data", "--seed", "1", "--count", "12", "--out", "train.jsonl"], dir.path());
    ok(
        &["gen-data", "--seed", "2", "--count", "6", "--out", "eval.jsonl", "--split", "eval"],
        dir.path(),
    );
    dir
}

#[test]
fn generate_then_train_writes_metrics() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("train.jsonl.provenance.json").exists());
    ok(
        &[
            "--config", "tiny.toml", "train", "--algo", "nlft", "--data", "train.jsonl", "--eval-data", "eval.jsonl",
            "--out-dir", "run", "--epochs", "3",
        ],
        d,
    );
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    assert!(d.join("run/manifest.json").exists());
}

#[test]
fn sft_and_nlft_configs_differ_only_in_algorithm() {
    let dir = setup();
    let d = dir.path();
    for (algo, out) in [("nlft", "a"), ("sft", "b")] {
        ok(
            &[
                "--config", "tiny.toml", "train", "--algo", algo, "--data", "train.jsonl", "--out-dir", out,
                "--epochs", "1",
            ],
            d,
        );
    }
    let read = |p: &str| -> Value { serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap() };
    let (a, b) = (read("a/config.json"), read("b/config.json"));
    let (ao, bo) = (a.as_object().unwrap(), b.as_object().unwrap());
    let differing: Vec<&String> = ao.keys().filter(|k| ao.get(*k) != bo.get(*k)).collect();
    assert_eq!(differing, ["algorithm"], "{a}\n{b}");
}

#[test]
fn self_study_pipeline_runs_end_to_end() {
    let dir = setup();
    let d = dir.path();
    ok(&["--config", "tiny.toml", "train", "--algo", "sft", "--data", "train.jsonl", "--out-dir", "base", "--epochs", "1"], d);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("base/manifest.json")).unwrap()).unwrap();
    let ckpt = d.join("base").join(manifest["final_checkpoint"].as_str().unwrap());
    let ckpt = ckpt.to_str().unwrap();
    ok(
        &[
            "--config", "tiny.toml", "gen-outputs", "--mode", "self-study", "--model", ckpt, "--data", "train.jsonl",
            "--out", "outs.jsonl", "--max-tokens", "20",
        ],
        d,
    );
    ok(&["judge", "--data", "outs.jsonl", "--out", "judged.jsonl"], d);
    ok(&["--config", "tiny.toml", "collect", "--model", ckpt, "--data", "judged.jsonl", "--out", "tables.jsonl"], d);
    assert!(!fs::read_to_string(d.join("tables.jsonl")).unwrap().is_empty());
    let report = ok(
        &["--config", "tiny.toml", "eval", "--model", ckpt, "--data", "eval.jsonl", "--max-tokens", "20"],
        d,
    );
    assert!(report.contains("accuracy"), "{report}");
    ok(&["compare", "--runs", "base", "--out", "cmp"], d);
    assert!(d.join("cmp/comparison.csv").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nlft(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = nlft(&["judge", "--data", "absent.jsonl", "--out", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
