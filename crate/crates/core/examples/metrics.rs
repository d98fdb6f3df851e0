//! Task metrics on small hand-checkable inputs.

use longseq::metrics::{decode_iob, ner_entity_f1, qa_em_f1, qa_em_f1_raw, roc_auc, weighted_mean_auc, LabelAuc};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = qa_em_f1("The big cat", &["the cat"]);
    println!("qa normalized: em {} f1 {:.4}", s.em, s.f1);
    let s = qa_em_f1_raw("big cat", &["the cat"]);
    println!("qa raw: em {} f1 {:.4}", s.em, s.f1);

    let gold = vec!["B-PER", "I-PER", "O", "B-DRUG", "O", "B-PROB"];
    let pred = vec!["B-PER", "I-PER", "O", "B-DRUG", "O", "O"];
    println!("entities: {:?}", decode_iob(&gold)?);
    let ner = ner_entity_f1(&[(gold, pred)])?;
    println!(
        "ner: precision {:.3} recall {:.3} f1 {:.3} (token f1 {:.3})",
        ner.entity.precision, ner.entity.recall, ner.entity.f1, ner.token.f1
    );

    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])?;
    println!("auc {auc}");
    let w = weighted_mean_auc(&[
        LabelAuc {
            auc: 0.5,
            positive_count: 3,
        },
        LabelAuc {
            auc: 1.0,
            positive_count: 1,
        },
    ])?;
    println!("weighted auc {w}");
    Ok(())
}
