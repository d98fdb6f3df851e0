//! Pretrains a small sliding-window encoder with masked-token prediction and
//! reports perplexity and top-5 accuracy on held-out documents.

use longseq::attention::AttentionConfig;
use longseq::model::{init_model, ModelConfig};
use longseq::textprep::{synth_corpus, SynthSpec};
use longseq::tokenizer::train_bpe;
use longseq::training::{evaluate_mlm, pack_documents, pretrain_mlm, MaskingScheme, RunHooks, ScheduleKind, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train_docs = synth_corpus(&SynthSpec::with_numbered_rules(300, 120, 60, 8, 6, 1))?;
    let held_out = synth_corpus(&SynthSpec::with_numbered_rules(40, 120, 60, 8, 6, 2))?;
    let tok = train_bpe(train_docs.iter().map(|d| d.text.as_str()), 400)?;

    let mut config = ModelConfig::tiny(tok.vocab_size(), 128);
    config.d_model = 32;
    config.d_ff = 64;
    config.attention = AttentionConfig::longformer(16, vec![0]);

    let ids: Vec<Vec<u32>> = train_docs.iter().map(|d| tok.encode(&d.text, false)).collect();
    let sequences = pack_documents(&ids, config.max_positions);
    let eval: Vec<Vec<u32>> = held_out.iter().map(|d| tok.encode(&d.text, false)).collect();

    let before = init_model(&config, 0)?;
    let r0 = evaluate_mlm(&before, &eval, 128, 0.10, 9)?;

    let train = TrainConfig {
        lr: 2e-3,
        weight_decay: 0.01,
        schedule: ScheduleKind::LinearWarmupDecay,
        warmup_steps: 20,
        total_steps: 300,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let hooks = RunHooks {
        log: Some(&mut log),
        ..RunHooks::default()
    };
    let after = pretrain_mlm(before, &sequences, &train, &MaskingScheme::training(3), hooks)?;
    for line in String::from_utf8(log)?.lines().step_by(50) {
        println!("{line}");
    }
    let r1 = evaluate_mlm(&after, &eval, 128, 0.10, 9)?;
    println!("before: ppl {:.1} top5 {:.3}", r0.perplexity, r0.top5_accuracy);
    println!("after:  ppl {:.1} top5 {:.3} over {} masked tokens", r1.perplexity, r1.top5_accuracy, r1.masked_position_count);
    Ok(())
}
