//! Splits a long token sequence into overlapping chunks, stitches per-chunk
//! tags back together, and pools per-chunk probabilities into one document
//! score.

use longseq::longdoc::{
    aggregate_token_predictions, chunk_with_stride, classify_long_document, pool_chunk_probabilities, ChunkingConfig,
};
use longseq::model::{init_model, HeadConfig, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ids: Vec<u32> = (0..1000).map(|i| 4 + i % 50).collect();
    let cfg = ChunkingConfig::short();
    let set = chunk_with_stride("doc-1", &ids, &cfg)?;
    for c in &set.chunks {
        println!("chunk [{}, {})", c.start, c.end());
    }

    // each chunk "predicts" its own index; the nearest-to-center chunk wins
    let preds: Vec<Vec<usize>> = set.chunks.iter().enumerate().map(|(k, c)| vec![k; c.ids.len()]).collect();
    let merged = aggregate_token_predictions(&preds, &set)?;
    for pos in [0, 383, 450, 500, 700, 999] {
        println!("token {pos} taken from chunk {}", merged[pos]);
    }

    for p in [vec![0.2, 0.8], vec![0.9], vec![0.1, 0.1, 0.1, 0.95]] {
        let pooled = pool_chunk_probabilities(&p)?;
        println!("pool {:?} = {:.4}", p, pooled.pooled);
    }

    let mut config = ModelConfig::tiny(60, 128);
    config.head = HeadConfig::SeqCls {
        num_labels: 3,
        multilabel: true,
    };
    let model = init_model(&config, 1)?;
    let r = classify_long_document(&model, &ids, &ChunkingConfig::new(128, 32))?;
    println!("{} chunks, document probabilities {:?}", r.per_chunk.len(), r.probabilities);
    Ok(())
}
