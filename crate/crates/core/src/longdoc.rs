//! Sliding-window chunking of long token sequences, per-chunk inference, and
//! reduction of chunk outputs to document-level predictions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{Batch, Checkpoint, HeadConfig, Labels, ModelError, Prediction};
use crate::tensor::sigmoid;
use crate::tokenizer::{TokenId, CLS, SEP};

#[derive(Debug, thiserror::Error)]
pub enum LongDocError {
    #[error("chunking: {0}")]
    Config(String),
    #[error("document is empty")]
    EmptyDocument,
    #[error("token {0} is not covered by any chunk")]
    CoverageGap(usize),
    #[error("no valid answer span in any chunk")]
    NoValidSpan,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("no chunk probabilities to pool")]
    NothingToPool,
    #[error("chunk {chunk}: {got} predictions for {expected} tokens")]
    PredictionLength { chunk: usize, expected: usize, got: usize },
    #[error("head mismatch: need {want}, checkpoint has {have}")]
    HeadMismatch { want: &'static str, have: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingConfig {
    pub chunk_len: usize,
    /// Tokens shared by consecutive chunks, or the distance between chunk
    /// starts when `stride_means_step` is set.
    pub overlap: usize,
    pub truncate_doc_to: Option<usize>,
    pub stride_means_step: bool,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self::long()
    }
}

impl ChunkingConfig {
    pub fn long() -> Self {
        Self {
            chunk_len: 4096,
            overlap: 1024,
            truncate_doc_to: Some(4096),
            stride_means_step: false,
        }
    }

    pub fn short() -> Self {
        Self {
            chunk_len: 512,
            overlap: 128,
            truncate_doc_to: Some(4096),
            stride_means_step: false,
        }
    }

    pub fn new(chunk_len: usize, overlap: usize) -> Self {
        Self {
            chunk_len,
            overlap,
            truncate_doc_to: None,
            stride_means_step: false,
        }
    }

    pub fn validate(&self) -> Result<(), LongDocError> {
        if self.chunk_len == 0 {
            return Err(LongDocError::Config("chunk_len must be positive".into()));
        }
        if self.stride_means_step {
            if self.overlap == 0 || self.overlap > self.chunk_len {
                return Err(LongDocError::Config(format!(
                    "step {} must lie in 1..={}",
                    self.overlap, self.chunk_len
                )));
            }
        } else if self.overlap >= self.chunk_len {
            return Err(LongDocError::Config(format!(
                "overlap {} must be below chunk_len {}",
                self.overlap, self.chunk_len
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        if self.stride_means_step {
            self.overlap
        } else {
            self.chunk_len - self.overlap
        }
    }

    /// Shrinks the chunk to at most `room` tokens, scaling the overlap by
    /// the same factor.
    pub fn fit_to(&self, room: usize) -> Self {
        if self.chunk_len <= room {
            return self.clone();
        }
        let room = room.max(1);
        let mut overlap = (self.overlap as u128 * room as u128 / self.chunk_len as u128) as usize;
        if self.stride_means_step {
            overlap = overlap.clamp(1, room);
        } else {
            overlap = overlap.min(room - 1);
        }
        Self {
            chunk_len: room,
            overlap,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub ids: Vec<TokenId>,
}

impl Chunk {
    pub fn end(&self) -> usize {
        self.start + self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub doc_id: String,
    pub doc_len: usize,
    pub chunks: Vec<Chunk>,
}

/// Chunk starts at 0, step, 2·step, … up to the first chunk that reaches
/// the end of the (optionally truncated) document.
pub fn chunk_with_stride(doc_id: &str, ids: &[TokenId], cfg: &ChunkingConfig) -> Result<ChunkSet, LongDocError> {
    cfg.validate()?;
    let ids = match cfg.truncate_doc_to {
        Some(cap) => &ids[..ids.len().min(cap)],
        None => ids,
    };
    if ids.is_empty() {
        return Err(LongDocError::EmptyDocument);
    }
    let step = cfg.step();
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cfg.chunk_len).min(ids.len());
        chunks.push(Chunk {
            start,
            ids: ids[start..end].to_vec(),
        });
        if end == ids.len() {
            break;
        }
        start += step;
    }
    Ok(ChunkSet {
        doc_id: doc_id.to_string(),
        doc_len: ids.len(),
        chunks,
    })
}

/// One prediction per document token, each taken from the chunk where the
/// token sits farthest from a chunk edge (`min(pos − start, end − pos)`);
/// ties go to the earlier chunk.
pub fn aggregate_token_predictions<T: Clone>(chunk_preds: &[Vec<T>], set: &ChunkSet) -> Result<Vec<T>, LongDocError> {
    for (c, (chunk, preds)) in set.chunks.iter().zip(chunk_preds).enumerate() {
        if chunk.ids.len() != preds.len() {
            return Err(LongDocError::PredictionLength {
                chunk: c,
                expected: chunk.ids.len(),
                got: preds.len(),
            });
        }
    }
    if chunk_preds.len() != set.chunks.len() {
        return Err(LongDocError::PredictionLength {
            chunk: chunk_preds.len().min(set.chunks.len()),
            expected: set.chunks.len(),
            got: chunk_preds.len(),
        });
    }
    let mut out = Vec::with_capacity(set.doc_len);
    for pos in 0..set.doc_len {
        let mut best: Option<(usize, usize)> = None;
        for (c, chunk) in set.chunks.iter().enumerate() {
            if pos < chunk.start || pos >= chunk.end() {
                continue;
            }
            let dist = (pos - chunk.start).min(chunk.end() - pos);
            if best.is_none_or(|(_, d)| dist > d) {
                best = Some((c, dist));
            }
        }
        let (c, _) = best.ok_or(LongDocError::CoverageGap(pos))?;
        out.push(chunk_preds[c][pos - set.chunks[c].start].clone());
    }
    Ok(out)
}

/// Start/end logits of one chunk. `context_offset` is the index in the
/// logit vectors of the first context token, which sits at document
/// position `doc_start`; `context_len` context tokens follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSpanLogits {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub context_offset: usize,
    pub context_len: usize,
    pub doc_start: usize,
}

/// Document span with inclusive token bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Best `start_logit + end_logit` span over all chunks with
/// `start ≤ end < start + max_answer_len`, restricted to context tokens.
/// Ties go to the earliest start, then the shortest span.
pub fn aggregate_qa_spans(chunks: &[ChunkSpanLogits], max_answer_len: usize) -> Result<DocSpan, LongDocError> {
    let better = |a: &DocSpan, b: &DocSpan| {
        a.score > b.score || (a.score == b.score && (a.start, a.end) < (b.start, b.end))
    };
    let mut best: Option<DocSpan> = None;
    for ch in chunks {
        let lim = ch.start_logits.len().min(ch.end_logits.len());
        let ctx_end = (ch.context_offset + ch.context_len).min(lim);
        for s in ch.context_offset..ctx_end {
            for e in s..ctx_end.min(s + max_answer_len) {
                let cand = DocSpan {
                    start: ch.doc_start + s - ch.context_offset,
                    end: ch.doc_start + e - ch.context_offset,
                    score: ch.start_logits[s] + ch.end_logits[e],
                };
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand);
                }
            }
        }
    }
    best.ok_or(LongDocError::NoValidSpan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledPrediction {
    pub n: usize,
    pub p: Vec<f64>,
    pub pooled: f64,
}

/// `(max p + (n/2)·mean p) / (1 + n/2)`. A constant vector (including a
/// single chunk) returns its value exactly.
pub fn pool_chunk_probabilities(p: &[f64]) -> Result<PooledPrediction, LongDocError> {
    if p.is_empty() {
        return Err(LongDocError::NothingToPool);
    }
    if let Some(&bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(LongDocError::BadProbability(bad));
    }
    let n = p.len() as f64;
    let max = p.iter().copied().fold(0.0, f64::max);
    let pooled = if p.iter().all(|&x| x == p[0]) {
        p[0]
    } else {
        let mean = p.iter().sum::<f64>() / n;
        ((max + n / 2.0 * mean) / (1.0 + n / 2.0)).clamp(0.0, 1.0)
    };
    Ok(PooledPrediction {
        n: p.len(),
        p: p.to_vec(),
        pooled,
    })
}

fn with_specials(ids: &[TokenId]) -> Vec<TokenId> {
    let mut seq = Vec::with_capacity(ids.len() + 2);
    seq.push(CLS);
    seq.extend_from_slice(ids);
    seq.push(SEP);
    seq
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongDocClassification {
    /// One probability per label (sigmoid for multi-label heads, softmax
    /// otherwise).
    pub probabilities: Vec<f64>,
    pub per_chunk: Vec<Vec<f64>>,
}

/// Label probabilities for a document given without special tokens. A
/// document that fits the model is classified in one pass; otherwise it is
/// chunked per `cfg` and each label is pooled across chunks.
pub fn classify_long_document(
    ckpt: &Checkpoint,
    ids: &[TokenId],
    cfg: &ChunkingConfig,
) -> Result<LongDocClassification, LongDocError> {
    let HeadConfig::SeqCls { multilabel, .. } = ckpt.config.head else {
        return Err(LongDocError::HeadMismatch {
            want: "seq_cls",
            have: ckpt.config.head.name(),
        });
    };
    if ids.is_empty() {
        return Err(LongDocError::EmptyDocument);
    }
    let room = ckpt.config.max_positions.saturating_sub(2).max(1);
    let pieces: Vec<Vec<TokenId>> = if ids.len() <= room {
        vec![ids.to_vec()]
    } else {
        let set = chunk_with_stride("", ids, &cfg.fit_to(room))?;
        set.chunks.into_iter().map(|c| c.ids).collect()
    };
    let seqs: Vec<Vec<TokenId>> = pieces.iter().map(|p| with_specials(p)).collect();
    let globals = vec![vec![0]; seqs.len()];
    let Prediction::Sequence(logits) = ckpt.predict(&Batch::from_sequences(&seqs, &globals, Labels::None))? else {
        unreachable!("seq_cls head yields sequence logits")
    };
    let per_chunk: Vec<Vec<f64>> = (0..seqs.len())
        .map(|b| {
            let row = logits.row(b);
            if multilabel {
                row.iter().map(|&x| sigmoid(x)).collect()
            } else {
                softmax(row)
            }
        })
        .collect();
    let probabilities = if per_chunk.len() == 1 {
        per_chunk[0].clone()
    } else {
        let labels = per_chunk[0].len();
        (0..labels)
            .map(|k| {
                let col: Vec<f64> = per_chunk.iter().map(|p| p[k]).collect();
                pool_chunk_probabilities(&col).map(|p| p.pooled)
            })
            .collect::<Result<_, _>>()?
    };
    Ok(LongDocClassification {
        probabilities,
        per_chunk,
    })
}

/// Tag id per document token, from chunked token-classification passes.
pub fn predict_token_tags(
    ckpt: &Checkpoint,
    ids: &[TokenId],
    cfg: &ChunkingConfig,
) -> Result<Vec<usize>, LongDocError> {
    if !matches!(ckpt.config.head, HeadConfig::TokenCls { .. }) {
        return Err(LongDocError::HeadMismatch {
            want: "token_cls",
            have: ckpt.config.head.name(),
        });
    }
    let cfg = ChunkingConfig {
        truncate_doc_to: None,
        ..cfg.fit_to(ckpt.config.max_positions.saturating_sub(2).max(1))
    };
    let set = chunk_with_stride("", ids, &cfg)?;
    let seqs: Vec<Vec<TokenId>> = set.chunks.iter().map(|c| with_specials(&c.ids)).collect();
    let globals = vec![vec![0]; seqs.len()];
    let batch = Batch::from_sequences(&seqs, &globals, Labels::None);
    let Prediction::Tokens(logits) = ckpt.predict(&batch)? else {
        unreachable!("token_cls head yields token logits")
    };
    let (len, tags) = (logits.shape()[1], logits.shape()[2]);
    let preds: Vec<Vec<usize>> = set
        .chunks
        .iter()
        .enumerate()
        .map(|(b, c)| {
            (0..c.ids.len())
                .map(|i| {
                    let row = &logits.data()[(b * len + i + 1) * tags..(b * len + i + 2) * tags];
                    argmax(row)
                })
                .collect()
        })
        .collect();
    aggregate_token_predictions(&preds, &set)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Model input for one QA window: `CLS question SEP context SEP`, with CLS
/// and the question granted global attention.
pub fn qa_window(question: &[TokenId], context: &[TokenId]) -> (Vec<TokenId>, Vec<usize>) {
    let mut seq = Vec::with_capacity(question.len() + context.len() + 3);
    seq.push(CLS);
    seq.extend_from_slice(question);
    seq.push(SEP);
    seq.extend_from_slice(context);
    seq.push(SEP);
    let globals = (0..=question.len()).collect();
    (seq, globals)
}

/// Context tokens available per QA window after the question and specials.
pub fn qa_context_room(max_positions: usize, question_len: usize) -> usize {
    max_positions.saturating_sub(question_len + 3).max(1)
}

/// Best answer span in document (context) token positions. The question is
/// repeated in every window.
pub fn predict_answer_span(
    ckpt: &Checkpoint,
    question: &[TokenId],
    context: &[TokenId],
    cfg: &ChunkingConfig,
    max_answer_len: usize,
) -> Result<(DocSpan, Vec<ChunkSpanLogits>), LongDocError> {
    if ckpt.config.head != HeadConfig::SpanQa {
        return Err(LongDocError::HeadMismatch {
            want: "span_qa",
            have: ckpt.config.head.name(),
        });
    }
    let cfg = ChunkingConfig {
        truncate_doc_to: None,
        ..cfg.fit_to(qa_context_room(ckpt.config.max_positions, question.len()))
    };
    let set = chunk_with_stride("", context, &cfg)?;
    let (seqs, globals): (Vec<_>, Vec<_>) = set.chunks.iter().map(|c| qa_window(question, &c.ids)).unzip();
    let Prediction::Span { start, end } = ckpt.predict(&Batch::from_sequences(&seqs, &globals, Labels::None))? else {
        unreachable!("span head yields span logits")
    };
    let len = start.shape()[1];
    let logits: Vec<ChunkSpanLogits> = set
        .chunks
        .iter()
        .enumerate()
        .map(|(b, c)| ChunkSpanLogits {
            start_logits: start.data()[b * len..(b + 1) * len].to_vec(),
            end_logits: end.data()[b * len..(b + 1) * len].to_vec(),
            context_offset: question.len() + 2,
            context_len: c.ids.len(),
            doc_start: c.start,
        })
        .collect();
    Ok((aggregate_qa_spans(&logits, max_answer_len)?, logits))
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub task: String,
    pub prediction: serde_json::Value,
    pub per_chunk: Vec<serde_json::Value>,
}

pub fn write_predictions_jsonl<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<(), LongDocError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn starts(len: usize, chunk: usize, overlap: usize) -> Vec<(usize, usize)> {
        let ids = vec![7; len];
        chunk_with_stride("d", &ids, &ChunkingConfig::new(chunk, overlap))
            .unwrap()
            .chunks
            .iter()
            .map(|c| (c.start, c.end()))
            .collect()
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(starts(400, 512, 128), [(0, 400)]);
        assert_eq!(starts(1000, 512, 128), [(0, 512), (384, 896), (768, 1000)]);
        assert_eq!(starts(6000, 4096, 1024), [(0, 4096), (3072, 6000)]);
        assert!(chunk_with_stride("d", &[1], &ChunkingConfig::new(4, 4)).is_err());
        assert!(chunk_with_stride("d", &[], &ChunkingConfig::new(4, 1)).is_err());
    }

    #[test]
    fn step_reading() {
        let cfg = ChunkingConfig {
            stride_means_step: true,
            ..ChunkingConfig::new(512, 128)
        };
        let set = chunk_with_stride("d", &vec![1; 700], &cfg).unwrap();
        let s: Vec<usize> = set.chunks.iter().map(|c| c.start).collect();
        assert_eq!(s, [0, 128, 256]);
    }

    #[test]
    fn truncation_applies_first() {
        let cfg = ChunkingConfig {
            truncate_doc_to: Some(10),
            ..ChunkingConfig::new(4, 1)
        };
        let set = chunk_with_stride("d", &(0..50).collect::<Vec<_>>(), &cfg).unwrap();
        assert_eq!(set.doc_len, 10);
        assert_eq!(set.chunks.last().unwrap().end(), 10);
    }

    #[test]
    fn ownership_by_edge_distance() {
        let set = chunk_with_stride("d", &vec![1; 1000], &ChunkingConfig::new(512, 128)).unwrap();
        let preds: Vec<Vec<usize>> = set.chunks.iter().enumerate().map(|(c, ch)| vec![c; ch.ids.len()]).collect();
        let agg = aggregate_token_predictions(&preds, &set).unwrap();
        assert_eq!(agg[500], 1);
        assert_eq!(agg[447], 0); // 447 vs 63 from the second chunk's start: 65 vs 63
        assert_eq!(agg[448], 0); // 64 vs 64: tie, earlier chunk
        assert_eq!(agg[449], 1);
        assert_eq!(agg.len(), 1000);
    }

    #[test]
    fn qa_examples() {
        let mut start = vec![0.0; 8];
        let mut end = vec![0.0; 8];
        start[3] = 5.0;
        end[5] = 5.0;
        let one = ChunkSpanLogits {
            start_logits: start,
            end_logits: end,
            context_offset: 0,
            context_len: 8,
            doc_start: 0,
        };
        let s = aggregate_qa_spans(&[one.clone()], 30).unwrap();
        assert_eq!((s.start, s.end), (3, 5));

        let mut a = one.clone();
        a.start_logits = vec![3.55; 8];
        a.end_logits = vec![3.55; 8];
        a.doc_start = 100;
        let mut b = a.clone();
        b.start_logits = vec![3.45; 8];
        b.end_logits = vec![3.45; 8];
        b.doc_start = 0;
        let ab = aggregate_qa_spans(&[a.clone(), b.clone()], 30).unwrap();
        let ba = aggregate_qa_spans(&[b, a], 30).unwrap();
        assert_eq!(ab, ba);
        assert_eq!((ab.start, ab.end), (100, 100));
        assert!(aggregate_qa_spans(&[], 30).is_err());
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(pool_chunk_probabilities(&[0.7]).unwrap().pooled, 0.7);
        assert_eq!(pool_chunk_probabilities(&[0.5, 0.5]).unwrap().pooled, 0.5);
        assert!((pool_chunk_probabilities(&[0.2, 0.8]).unwrap().pooled - 0.65).abs() < 1e-15);
        assert!((pool_chunk_probabilities(&[0.9, 0.1, 0.2]).unwrap().pooled - 0.6).abs() < 1e-15);
        assert!(pool_chunk_probabilities(&[]).is_err());
        assert!(pool_chunk_probabilities(&[1.2]).is_err());
    }
}
