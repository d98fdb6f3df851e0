//! Fine-tunes one small encoder on synthetic extractive QA, IOB entity
//! tagging, and document classification, then scores each on held-out data.

use longseq::datasets::{synth_cls, synth_ner, synth_qa, TaskData};
use longseq::longdoc::ChunkingConfig;
use longseq::model::{init_model, ModelConfig};
use longseq::tokenizer::train_bpe;
use longseq::training::{evaluate_task, finetune, ScheduleKind, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tasks = [
        ("qa", TaskData::Qa(synth_qa(60, 40, 1)), TaskData::Qa(synth_qa(20, 40, 2))),
        ("ner", TaskData::Ner(synth_ner(60, 1)), TaskData::Ner(synth_ner(20, 2))),
        ("cls", TaskData::Cls(synth_cls(60, 40, false, 1)), TaskData::Cls(synth_cls(20, 40, false, 2))),
    ];
    let mut texts = Vec::new();
    for (_, train, _) in &tasks {
        match train {
            TaskData::Qa(v) => texts.extend(v.iter().flat_map(|e| [e.question.clone(), e.context.clone()])),
            TaskData::Ner(v) => texts.extend(v.iter().map(|e| e.tokens.join(" "))),
            TaskData::Cls(v) => texts.extend(v.iter().map(|e| e.text.clone())),
            TaskData::Nli(_) => {}
        }
    }
    let tok = train_bpe(texts.iter().map(String::as_str), 400)?;

    let mut config = ModelConfig::tiny(tok.vocab_size(), 128);
    config.d_model = 64;
    config.d_ff = 128;
    let base = init_model(&config, 0)?;
    let chunking = ChunkingConfig::new(126, 32);
    let train = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        schedule: ScheduleKind::Constant,
        batch_size: 2,
        epochs: 6,
        seed: 4,
        ..TrainConfig::default()
    };
    for (name, train_set, test_set) in &tasks {
        let out = finetune(&base, train_set, test_set, &tok, &train, &chunking)?;
        let (report, preds) = evaluate_task(&out.checkpoint, &tok, test_set, &chunking)?;
        println!("{name}: best epoch {:?}, {:?}", out.best_epoch, report.metrics);
        println!("  e.g. {} -> {}", preds[0].id, preds[0].prediction);
    }
    Ok(())
}
