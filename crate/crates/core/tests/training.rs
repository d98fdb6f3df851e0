use longseq::datasets::{synth_cls, synth_ner, synth_qa, TaskData};
use longseq::longdoc::ChunkingConfig;
use longseq::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig};
use longseq::textprep::{synth_corpus, SynthSpec};
use longseq::tokenizer::{train_bpe, BpeModel, TokenId};
use longseq::training::{
    evaluate_task, finetune, pack_documents, pretrain_mlm, MaskingScheme, RunHooks, ScheduleKind, TrainConfig,
};

fn corpus() -> (BpeModel, Vec<Vec<TokenId>>) {
    let spec = SynthSpec::with_numbered_rules(50, 40, 30, 10, 4, 7);
    let docs = synth_corpus(&spec).unwrap();
    let tok = train_bpe(docs.iter().map(|d| d.text.as_str()), 320).unwrap();
    let ids = docs.iter().map(|d| tok.encode(&d.text, false)).collect::<Vec<_>>();
    (tok, pack_documents(&ids, 64))
}

fn pretrain_config(steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        schedule: ScheduleKind::Constant,
        total_steps: steps,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_lowers_loss() {
    let (tok, seqs) = corpus();
    let config = ModelConfig::tiny(tok.vocab_size(), 64);
    let start = init_model(&config, 1).unwrap();
    let mut log = Vec::new();
    let hooks = RunHooks {
        log: Some(&mut log),
        ..RunHooks::default()
    };
    let end = pretrain_mlm(start, &seqs, &pretrain_config(200, 3e-3), &MaskingScheme::training(5), hooks).unwrap();
    assert_eq!(end.step, 200);
    let losses: Vec<f64> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head * 0.8, "{head} -> {tail}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (tok, seqs) = corpus();
    let mut config = ModelConfig::tiny(tok.vocab_size(), 64);
    config.precision = longseq::tensor::Precision::F64;
    let start = init_model(&config, 1).unwrap();
    let mut train = pretrain_config(3, 0.0);
    train.weight_decay = 0.0;
    let end = pretrain_mlm(start.clone(), &seqs, &train, &MaskingScheme::training(5), RunHooks::default()).unwrap();
    assert_eq!(end.params, start.params);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (tok, seqs) = corpus();
    let config = ModelConfig::tiny(tok.vocab_size(), 64);
    let train = pretrain_config(12, 1e-3);
    let masking = MaskingScheme::training(5);
    let straight = pretrain_mlm(init_model(&config, 1).unwrap(), &seqs, &train, &masking, RunHooks::default()).unwrap();

    let half = pretrain_mlm(
        init_model(&config, 1).unwrap(),
        &seqs,
        &train,
        &masking,
        RunHooks {
            stop_at: Some(5),
            ..RunHooks::default()
        },
    )
    .unwrap();
    assert_eq!(half.step, 5);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&half, dir.path()).unwrap();
    let reloaded = load_checkpoint(dir.path()).unwrap();
    let resumed = pretrain_mlm(reloaded, &seqs, &train, &masking, RunHooks::default()).unwrap();
    assert_eq!(resumed, straight);
}

fn task_tokenizer(texts: &[String]) -> BpeModel {
    train_bpe(texts.iter().map(String::as_str), 400).unwrap()
}

fn finetune_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        schedule: ScheduleKind::Constant,
        batch_size: 1,
        epochs: 6,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn base_model(tok: &BpeModel) -> longseq::model::Checkpoint {
    let mut config = ModelConfig::tiny(tok.vocab_size(), 128);
    config.d_model = 64;
    config.d_ff = 128;
    init_model(&config, 2).unwrap()
}

fn overfit(data: TaskData, texts: Vec<String>, key: &str) -> f64 {
    let tok = task_tokenizer(&texts);
    let chunking = ChunkingConfig::new(126, 32);
    let out = finetune(&base_model(&tok), &data, &data, &tok, &finetune_config(), &chunking).unwrap();
    let (report, _) = evaluate_task(&out.checkpoint, &tok, &data, &chunking).unwrap();
    report.metrics[key]
}

#[test]
fn overfits_small_qa_set() {
    let v = synth_qa(20, 30, 4);
    let texts = v.iter().flat_map(|e| [e.question.clone(), e.context.clone()]).collect();
    assert_eq!(overfit(TaskData::Qa(v), texts, "em"), 1.0);
}

#[test]
fn overfits_small_ner_set() {
    let v = synth_ner(20, 4);
    let texts = v.iter().map(|e| e.tokens.join(" ")).collect();
    assert_eq!(overfit(TaskData::Ner(v), texts, "entity_f1"), 1.0);
}

#[test]
fn overfits_small_classification_set() {
    let v = synth_cls(20, 30, false, 4);
    let texts = v.iter().map(|e| e.text.clone()).collect();
    assert_eq!(overfit(TaskData::Cls(v), texts, "accuracy"), 1.0);
}

#[test]
fn zero_epochs_returns_input() {
    let v = synth_cls(4, 10, false, 4);
    let tok = task_tokenizer(&v.iter().map(|e| e.text.clone()).collect::<Vec<_>>());
    let base = base_model(&tok);
    let train = TrainConfig {
        epochs: 0,
        ..finetune_config()
    };
    let data = TaskData::Cls(v);
    let out = finetune(&base, &data, &data, &tok, &train, &ChunkingConfig::new(126, 32)).unwrap();
    assert_eq!(out.checkpoint, base);
    assert!(out.best_epoch.is_none());
}

