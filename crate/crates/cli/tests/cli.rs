use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "d_w = 16\nd_k = 8\nd_a = 8\nlayers = 1\nheads = 2\nffn_hidden = 32\n\
transe_epochs = 20\npretrain_steps = 10\nfinetune_steps = 10\nsynth_sentences = 120\n";

fn dynkc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynkc"))
        .args(args)
        .args(["--out", dir.to_str().unwrap(), "--config", dir.join("tiny.toml").to_str().unwrap(), "--seed", "3"])
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = dynkc(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).expect("json report");
    assert_eq!(v["schema_version"], 1, "{v}");
    v
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    ok(p, &["gen-synth"]);
    let (kg, corpus) = (p.join("triples.tsv"), p.join("corpus.jsonl"));
    ok(p, &["build-kg", "--kg", kg.to_str().unwrap(), "--corpus", corpus.to_str().unwrap()]);
    ok(p, &["train-transe"]);
    ok(p, &["pretrain"]);
    dir
}

#[test]
fn full_command_sequence() {
    let dir = prepared();
    let p = dir.path();
    let rel = ok(p, &["finetune", "relation"]);
    assert_eq!(rel["task"], "relation");
    assert!(p.join("finetune-relation/manifest.json").exists());

    let corpus = std::fs::read_to_string(p.join("corpus.jsonl")).unwrap();
    let first: Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    let text = first["text"].as_str().unwrap();
    let mention = first["mentions"][0]["entity"].as_str().unwrap();
    let rank = ok(p, &["rank-triples", "--sentence", text, "--mention", mention]);
    let total: f64 = rank["rows"].as_array().unwrap().iter().map(|r| r["importance_pct"].as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() < 0.1 || rank["warning"].is_string());

    let sweep = ok(p, &["eval-selection", "--threshold-sweep"]);
    assert_eq!(sweep["kind"], "sweep");
    assert!(sweep["dev"]["best_threshold"].is_f64());
    let fixed = ok(p, &["eval-selection", "--threshold", "0.2"]);
    assert_eq!(fixed["metrics"]["threshold"], 0.2);

    let attn = ok(p, &["ablate", "attention"]);
    assert_eq!(attn["rows"].as_array().unwrap().len(), 2);

    let khop = ok(p, &["ablate", "khop", "--K", "1,2"]);
    assert_eq!(khop["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn same_seed_gives_identical_reports() {
    let a = prepared();
    let b = prepared();
    for name in ["gen-synth", "build-kg", "train-transe", "pretrain"] {
        let f = format!("reports/{name}.json");
        assert_eq!(
            std::fs::read(a.path().join(&f)).unwrap(),
            std::fs::read(b.path().join(&f)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn mismatched_checkpoint_fails_with_structured_error() {
    let dir = prepared();
    let out = dynkc(dir.path(), &["eval-selection", "--K", "1"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("json error on stderr");
    assert_eq!(err["error"]["kind"], "manifest_mismatch");
    assert!(err["error"]["message"].as_str().unwrap().contains("model config"));
}

#[test]
fn missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = dynkc(dir.path(), &["train-transe"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "checkpoint");

    let out = dynkc(dir.path(), &["--set", "nonsense=1", "gen-synth"]);
    assert_eq!(out.status.code(), Some(1));
}
