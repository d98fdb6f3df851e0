use std::fs;
use std::path::Path;

use longseq::cli::{main_with_args, run, Subcommand};

const SMALL: &str = r#"
seed = 4

[paths]
output_dir = "out"

[tokenizer]
vocab_size = 320

[model]
max_positions = 64
d_model = 16
num_layers = 1
num_heads = 2
d_ff = 32

[model.attention]
kind = "longformer"
window_radius = 8
global_set = [0]

[pretrain]
lr = 1e-3
total_steps = 6
batch_size = 2
seed = 1

[finetune]
lr = 1e-3
epochs = 1
batch_size = 4
seed = 2

[task]
kind = "token_cls"

[chunking]
chunk_len = 60
overlap = 10

[synth]
train_examples = 8
dev_examples = 4
test_examples = 4
text_words = 20

[synth.corpus]
num_docs = 12
doc_length_tokens = 40
vocab_words = 20
dependency_distance = 10
seed = 3

[synth.corpus.dependency_rules]
cue0 = "tgt0"
cue1 = "tgt1"

[bench]
ns = [64, 128]
full_cap = 64
repeats = 1
d_model = 8
num_heads = 2
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn ok(sub: Subcommand, cfg: &Path) -> std::path::PathBuf {
    let out = run(sub, cfg, &[]);
    if let Err(e) = &out.result {
        panic!("{}: {e}", sub.name());
    }
    out.dir
}

fn pipeline(dir: &Path) -> Vec<String> {
    let cfg = write_config(dir);
    let mut metrics = Vec::new();
    for sub in [
        Subcommand::SynthData,
        Subcommand::Preprocess,
        Subcommand::TrainTokenizer,
        Subcommand::Pretrain,
        Subcommand::EvaluateMlm,
        Subcommand::Finetune,
        Subcommand::Evaluate,
        Subcommand::Predict,
    ] {
        let d = ok(sub, &cfg);
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["status"], "ok");
        assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
        if let Ok(m) = fs::read_to_string(d.join("metrics.json")) {
            metrics.push(m);
        }
    }
    metrics
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline(a.path());
    assert_eq!(ma, pipeline(b.path()));

    let mlm: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("out/evaluate-mlm/metrics.json")).unwrap()).unwrap();
    assert!(mlm["perplexity"].as_f64().unwrap() >= 1.0);
    let preds = fs::read_to_string(a.path().join("out/predict/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
}

#[test]
fn pretrain_alone_builds_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(Subcommand::SynthData, &cfg);
    ok(Subcommand::Pretrain, &cfg);
    ok(Subcommand::EvaluateMlm, &cfg);
    assert!(dir.path().join("out/tokenizer.json").exists());
}

#[test]
fn bench_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let d = ok(Subcommand::BenchAttention, &cfg);
    let csv = fs::read_to_string(d.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kind,n,pair_count,density,median_forward_ms"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][..3], ["full", "64", "4096"]);
    assert_eq!(rows[1][..3], ["full", "128", "16384"]);
    assert_eq!(rows[1][4], "skipped");
    assert!(rows[2][4].parse::<f64>().is_ok());
}

#[test]
fn failures_are_categorized_and_still_write_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(Subcommand::Evaluate, &cfg, &[]);
    assert_eq!(out.result.as_ref().unwrap_err().category(), "path");
    assert_eq!(out.exit_code(), 4);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out.manifest).unwrap()).unwrap();
    assert_eq!(manifest["status"], "error");
    assert_eq!(manifest["error"]["category"], "path");

    let out = run(Subcommand::Pretrain, &cfg, &["pretrain.learning_rate=1".into()]);
    assert_eq!(out.result.as_ref().unwrap_err().category(), "config");
    assert!(out.manifest.exists());
}

#[test]
fn overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(Subcommand::BenchAttention, &cfg, &["bench.ns=[32]".into(), "paths.output_dir=alt".into()]);
    assert!(out.result.is_ok());
    let csv = fs::read_to_string(dir.path().join("alt/bench-attention/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(main_with_args(["longseq", "frobnicate", "x.toml"]), 2);
    assert_eq!(main_with_args(["longseq"]), 2);
}
