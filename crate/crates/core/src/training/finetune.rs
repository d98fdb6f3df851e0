use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{mix, train_step, TrainConfig, TrainError};
use crate::datasets::{ClsExample, LabelValue, NerExample, NliExample, QaExample, TaskData, NLI_LABELS};
use crate::longdoc::{
    argmax, chunk_with_stride, classify_long_document, predict_answer_span, predict_token_tags, qa_context_room,
    qa_window, ChunkingConfig, PredictionRecord,
};
use crate::metrics::{accuracy, ner_entity_f1, qa_em_f1, roc_auc, weighted_mean_auc, EvaluationReport, LabelAuc};
use crate::model::{init_model_warm, Batch, Checkpoint, HeadConfig, Labels, Params, Prediction, IGNORE};
use crate::tokenizer::{BpeModel, TokenId, CLS, SEP};

fn example_err(id: &str, message: impl Into<String>) -> TrainError {
    TrainError::Example {
        id: id.to_string(),
        message: message.into(),
    }
}

/// Head and label names implied by a training set.
fn label_space(data: &TaskData) -> Result<(HeadConfig, Vec<String>), TrainError> {
    Ok(match data {
        TaskData::Qa(_) => (HeadConfig::SpanQa, Vec::new()),
        TaskData::Ner(v) => {
            let mut kinds = BTreeSet::new();
            for ex in v {
                for t in &ex.tags {
                    if let Some((_, k)) = t.split_once('-') {
                        kinds.insert(k.to_string());
                    }
                }
            }
            let mut names = vec!["O".to_string()];
            for k in kinds {
                names.push(format!("B-{k}"));
                names.push(format!("I-{k}"));
            }
            (HeadConfig::TokenCls { num_tags: names.len() }, names)
        }
        TaskData::Cls(v) => {
            if let Some(width) = v.first().and_then(|e| e.labels.as_ref()).map(|l| l.len()) {
                let names = (0..width).map(|k| format!("label_{k}")).collect();
                (
                    HeadConfig::SeqCls {
                        num_labels: width,
                        multilabel: true,
                    },
                    names,
                )
            } else {
                let mut max_index = None;
                let mut named = BTreeSet::new();
                for ex in v {
                    match &ex.label {
                        Some(LabelValue::Index(i)) => max_index = max_index.max(Some(*i)),
                        Some(LabelValue::Name(n)) => {
                            named.insert(n.clone());
                        }
                        None => return Err(example_err(&ex.id, "missing label")),
                    }
                }
                let names: Vec<String> = match (max_index, named.is_empty()) {
                    (Some(m), true) => (0..(m + 1).max(2)).map(|i| i.to_string()).collect(),
                    (None, false) => named.into_iter().collect(),
                    _ => return Err(TrainError::Config("mixing integer and named labels".into())),
                };
                (
                    HeadConfig::SeqCls {
                        num_labels: names.len(),
                        multilabel: false,
                    },
                    names,
                )
            }
        }
        TaskData::Nli(_) => (
            HeadConfig::SeqCls {
                num_labels: 3,
                multilabel: false,
            },
            NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        ),
    })
}

/// The encoder of `base` with a freshly initialized head for `data`'s task.
/// A checkpoint that already carries the right head is returned as is.
pub fn prepare_task_model(base: &Checkpoint, data: &TaskData, seed: u64) -> Result<Checkpoint, TrainError> {
    let (head, label_names) = label_space(data)?;
    if base.config.head == head && base.config.label_names == label_names {
        return Ok(base.clone());
    }
    let mut config = base.config.clone();
    config.head = head;
    config.label_names = label_names;
    let (names, tensors): (Vec<String>, Vec<_>) = base
        .params
        .iter()
        .filter(|(n, _)| !n.starts_with("head."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .unzip();
    let encoder_only = Checkpoint {
        params: Params::new(names, tensors),
        optimizer: None,
        ..base.clone()
    };
    Ok(init_model_warm(&config, seed, &encoder_only)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureLabel {
    Span(usize, usize),
    Tags(Vec<usize>),
    Class(usize),
    Multi(Vec<f64>),
}

/// One model input derived from an example.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub example: usize,
    pub ids: Vec<TokenId>,
    pub globals: Vec<usize>,
    pub label: FeatureLabel,
}

fn label_index(names: &[String], id: &str, name: &str) -> Result<usize, TrainError> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| example_err(id, format!("label {name:?} not in {names:?}")))
}

/// Word-piece ids of a pre-split sentence and the index of each word's first
/// piece.
fn encode_words(tok: &BpeModel, words: &[String]) -> (Vec<TokenId>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut first = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        first.push(ids.len());
        if i == 0 {
            ids.extend(tok.encode(w, false));
        } else {
            ids.extend(tok.encode(&format!(" {w}"), false));
        }
    }
    (ids, first)
}

fn question_ids(tok: &BpeModel, question: &str, max_positions: usize) -> Vec<TokenId> {
    let mut q = tok.encode(question, false);
    q.truncate(max_positions / 2);
    q
}

fn nli_input(tok: &BpeModel, ex: &NliExample, max_positions: usize) -> Vec<TokenId> {
    let mut hyp = tok.encode(&ex.hypothesis, false);
    hyp.truncate(max_positions / 2);
    let mut prem = tok.encode(&ex.premise, false);
    prem.truncate(max_positions.saturating_sub(hyp.len() + 3));
    let mut seq = vec![CLS];
    seq.extend(prem);
    seq.push(SEP);
    seq.extend(hyp);
    seq.push(SEP);
    seq
}

fn cls_input(tok: &BpeModel, text: &str, max_positions: usize) -> Vec<TokenId> {
    let mut ids = tok.encode(text, false);
    ids.truncate(max_positions.saturating_sub(2));
    let mut seq = vec![CLS];
    seq.extend(ids);
    seq.push(SEP);
    seq
}

/// Training inputs for every example. Long QA contexts and tag sequences
/// are windowed per `chunking`; long classification texts are truncated.
pub fn task_features(
    ckpt: &Checkpoint,
    tok: &BpeModel,
    data: &TaskData,
    chunking: &ChunkingConfig,
) -> Result<Vec<Feature>, TrainError> {
    let max_pos = ckpt.config.max_positions;
    let names = &ckpt.config.label_names;
    let mut out = Vec::new();
    match data {
        TaskData::Qa(v) => {
            for (k, ex) in v.iter().enumerate() {
                let q = question_ids(tok, &ex.question, max_pos);
                let spans = tok.encode_with_offsets(&ex.context, false);
                let ans = &ex.answers[0];
                let range = ans
                    .byte_range(&ex.context)
                    .ok_or_else(|| example_err(&ex.id, "answer not found in context"))?;
                let s = spans.iter().position(|t| t.end > range.start);
                let e = spans.iter().rposition(|t| t.start < range.end);
                let (Some(s), Some(e)) = (s, e) else {
                    return Err(example_err(&ex.id, "answer maps to no context token"));
                };
                let ids: Vec<TokenId> = spans.iter().map(|t| t.id).collect();
                let cfg = ChunkingConfig {
                    truncate_doc_to: None,
                    ..chunking.fit_to(qa_context_room(max_pos, q.len()))
                };
                for chunk in chunk_with_stride(&ex.id, &ids, &cfg)?.chunks {
                    let (seq, globals) = qa_window(&q, &chunk.ids);
                    let label = if s >= chunk.start && e < chunk.end() {
                        let off = q.len() + 2 - chunk.start;
                        FeatureLabel::Span(s + off, e + off)
                    } else {
                        FeatureLabel::Span(0, 0)
                    };
                    out.push(Feature {
                        example: k,
                        ids: seq,
                        globals,
                        label,
                    });
                }
            }
        }
        TaskData::Ner(v) => {
            for (k, ex) in v.iter().enumerate() {
                let (ids, first) = encode_words(tok, &ex.tokens);
                let mut labels = vec![IGNORE; ids.len()];
                for (w, &f) in first.iter().enumerate() {
                    if f < ids.len() && (w + 1 == first.len() || first[w + 1] > f) {
                        labels[f] = label_index(names, &ex.id, &ex.tags[w])?;
                    }
                }
                let cfg = ChunkingConfig {
                    truncate_doc_to: None,
                    ..chunking.fit_to(max_pos.saturating_sub(2).max(1))
                };
                for chunk in chunk_with_stride(&ex.id, &ids, &cfg)?.chunks {
                    let mut tags = vec![IGNORE];
                    tags.extend_from_slice(&labels[chunk.start..chunk.end()]);
                    tags.push(IGNORE);
                    if tags.iter().all(|&t| t == IGNORE) {
                        continue;
                    }
                    let mut seq = vec![CLS];
                    seq.extend_from_slice(&chunk.ids);
                    seq.push(SEP);
                    out.push(Feature {
                        example: k,
                        ids: seq,
                        globals: vec![0],
                        label: FeatureLabel::Tags(tags),
                    });
                }
            }
        }
        TaskData::Cls(v) => {
            for (k, ex) in v.iter().enumerate() {
                let label = match (&ex.labels, &ex.label) {
                    (Some(l), _) => FeatureLabel::Multi(l.iter().map(|&x| x as f64).collect()),
                    (None, Some(LabelValue::Index(i))) => FeatureLabel::Class(label_index(names, &ex.id, &i.to_string())?),
                    (None, Some(LabelValue::Name(n))) => FeatureLabel::Class(label_index(names, &ex.id, n)?),
                    (None, None) => return Err(example_err(&ex.id, "missing label")),
                };
                if let FeatureLabel::Multi(l) = &label {
                    if l.len() != names.len() {
                        return Err(example_err(&ex.id, format!("{} labels, model has {}", l.len(), names.len())));
                    }
                }
                out.push(Feature {
                    example: k,
                    ids: cls_input(tok, &ex.text, max_pos),
                    globals: vec![0],
                    label,
                });
            }
        }
        TaskData::Nli(v) => {
            for (k, ex) in v.iter().enumerate() {
                out.push(Feature {
                    example: k,
                    ids: nli_input(tok, ex, max_pos),
                    globals: vec![0],
                    label: FeatureLabel::Class(label_index(names, &ex.id, &ex.label)?),
                });
            }
        }
    }
    Ok(out)
}

fn feature_batch(features: &[&Feature]) -> Batch {
    let seqs: Vec<Vec<TokenId>> = features.iter().map(|f| f.ids.clone()).collect();
    let globals: Vec<Vec<usize>> = features.iter().map(|f| f.globals.clone()).collect();
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let labels = match &features[0].label {
        FeatureLabel::Span(..) => {
            let (start, end) = features
                .iter()
                .map(|f| match f.label {
                    FeatureLabel::Span(s, e) => (s, e),
                    _ => unreachable!(),
                })
                .unzip();
            Labels::Span { start, end }
        }
        FeatureLabel::Tags(_) => Labels::Tags(
            features
                .iter()
                .flat_map(|f| {
                    let FeatureLabel::Tags(t) = &f.label else { unreachable!() };
                    let mut t = t.clone();
                    t.resize(len, IGNORE);
                    t
                })
                .collect(),
        ),
        FeatureLabel::Class(_) => Labels::Class(
            features
                .iter()
                .map(|f| match f.label {
                    FeatureLabel::Class(c) => c,
                    _ => unreachable!(),
                })
                .collect(),
        ),
        FeatureLabel::Multi(_) => Labels::MultiLabel(
            features
                .iter()
                .flat_map(|f| {
                    let FeatureLabel::Multi(m) = &f.label else { unreachable!() };
                    m.clone()
                })
                .collect(),
        ),
    };
    Batch::from_sequences(&seqs, &globals, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// 1-based epoch that produced `checkpoint`; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub metric_name: String,
    /// Dev report after each epoch.
    pub history: Vec<EvaluationReport>,
}

/// Selection keys in priority order: the task metric, then a secondary
/// metric that separates epochs tied on the first.
fn dev_metric(report: &EvaluationReport) -> (String, Vec<f64>) {
    const ORDERS: [&[&str]; 4] = [&["f1", "em"], &["entity_f1", "token_f1"], &["auc", "accuracy"], &["accuracy"]];
    for keys in ORDERS {
        if report.metrics.contains_key(keys[0]) {
            let values = keys
                .iter()
                .map(|k| report.metrics.get(*k).copied().filter(|v| !v.is_nan()).unwrap_or(f64::NEG_INFINITY))
                .collect();
            return (keys[0].to_string(), values);
        }
    }
    ("none".to_string(), Vec::new())
}

fn improves(candidate: &[f64], best: &[f64]) -> bool {
    candidate.partial_cmp(best) == Some(std::cmp::Ordering::Greater)
}

/// Trains for `train.epochs` epochs and keeps the checkpoint with the best
/// dev metric (earlier epoch on full ties).
pub fn finetune(
    base: &Checkpoint,
    train_data: &TaskData,
    dev_data: &TaskData,
    tok: &BpeModel,
    train: &TrainConfig,
    chunking: &ChunkingConfig,
) -> Result<FinetuneOutcome, TrainError> {
    train.validate()?;
    if train.epochs == 0 {
        return Ok(FinetuneOutcome {
            checkpoint: base.clone(),
            best_epoch: None,
            metric_name: String::new(),
            history: Vec::new(),
        });
    }
    if train_data.task() != dev_data.task() {
        return Err(TrainError::Config("train and dev sets are for different tasks".into()));
    }
    if tok.vocab_size() != base.config.vocab_size {
        return Err(TrainError::VocabMismatch {
            tokenizer: tok.vocab_size(),
            model: base.config.vocab_size,
        });
    }
    let mut ckpt = prepare_task_model(base, train_data, train.seed)?;
    ckpt.optimizer = None;
    ckpt.step = 0;
    let features = task_features(&ckpt, tok, train_data, chunking)?;
    if features.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let per_update = train.batch_size * train.grad_accum_steps;
    let steps_per_epoch = features.len().div_ceil(per_update) as u64;
    let schedule = train.schedule_for(steps_per_epoch * train.epochs as u64);

    let mut best: Option<(Vec<f64>, usize, Checkpoint)> = None;
    let mut history = Vec::with_capacity(train.epochs);
    let mut metric_name = String::new();
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[train.seed, epoch as u64])));
        for update in order.chunks(per_update) {
            let batches: Vec<Batch> = update
                .chunks(train.batch_size)
                .map(|idx| feature_batch(&idx.iter().map(|&i| &features[i]).collect::<Vec<_>>()))
                .collect();
            let dropout_seed = mix(&[train.seed, epoch as u64, ckpt.step]);
            train_step(&mut ckpt, &batches, train, &schedule, dropout_seed)?;
        }
        let (report, _) = evaluate_task(&ckpt, tok, dev_data, chunking)?;
        let (name, value) = dev_metric(&report);
        metric_name = name;
        history.push(report);
        if best.as_ref().is_none_or(|(b, _, _)| improves(&value, b)) {
            best = Some((value, epoch + 1, ckpt.clone()));
        }
    }
    let (_, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        checkpoint,
        best_epoch: Some(best_epoch),
        metric_name,
        history,
    })
}

/// Per-example output of [`evaluate_task`].
pub type TaskPrediction = PredictionRecord;

/// Predicted answer text and the per-window logits behind it.
pub fn predict_answer_text(
    ckpt: &Checkpoint,
    tok: &BpeModel,
    ex: &QaExample,
    chunking: &ChunkingConfig,
) -> Result<(String, serde_json::Value), TrainError> {
    let q = question_ids(tok, &ex.question, ckpt.config.max_positions);
    let spans = tok.encode_with_offsets(&ex.context, false);
    if spans.is_empty() {
        return Ok((String::new(), json!([])));
    }
    let ids: Vec<TokenId> = spans.iter().map(|t| t.id).collect();
    let (span, logits) = predict_answer_span(ckpt, &q, &ids, chunking, 30)?;
    let text = ex.context[spans[span.start].start..spans[span.end].end].trim().to_string();
    let per_chunk = logits
        .iter()
        .map(|c| json!({"doc_start": c.doc_start, "context_len": c.context_len}))
        .collect();
    Ok((text, serde_json::Value::Array(per_chunk)))
}

fn predict_ner(
    ckpt: &Checkpoint,
    tok: &BpeModel,
    ex: &NerExample,
    chunking: &ChunkingConfig,
) -> Result<Vec<String>, TrainError> {
    let (ids, first) = encode_words(tok, &ex.tokens);
    if ids.is_empty() {
        return Ok(vec!["O".to_string(); ex.tokens.len()]);
    }
    let tags = predict_token_tags(ckpt, &ids, chunking)?;
    let names = &ckpt.config.label_names;
    Ok(first
        .iter()
        .map(|&f| {
            let t = tags.get(f).copied().unwrap_or(0);
            names.get(t).cloned().unwrap_or_else(|| "O".into())
        })
        .collect())
}

fn predict_cls(
    ckpt: &Checkpoint,
    tok: &BpeModel,
    ex: &ClsExample,
    chunking: &ChunkingConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), TrainError> {
    let mut ids = tok.encode(&ex.text, false);
    if ids.is_empty() {
        ids.push(SEP);
    }
    let r = classify_long_document(ckpt, &ids, chunking)?;
    Ok((r.probabilities, r.per_chunk))
}

fn predict_nli(ckpt: &Checkpoint, tok: &BpeModel, ex: &NliExample) -> Result<usize, TrainError> {
    let seq = nli_input(tok, ex, ckpt.config.max_positions);
    let Prediction::Sequence(logits) = ckpt.predict(&Batch::from_sequences(&[seq], &[vec![0]], Labels::None))? else {
        unreachable!("seq_cls head")
    };
    Ok(argmax(logits.row(0)))
}

/// Predicts every example and scores the predictions with the task metric.
pub fn evaluate_task(
    ckpt: &Checkpoint,
    tok: &BpeModel,
    data: &TaskData,
    chunking: &ChunkingConfig,
) -> Result<(EvaluationReport, Vec<TaskPrediction>), TrainError> {
    let task = data.task();
    let mut records = Vec::with_capacity(data.len());
    let record = |id: &str, prediction: serde_json::Value, per_chunk: Vec<serde_json::Value>| PredictionRecord {
        id: id.to_string(),
        task: task.name().to_string(),
        prediction,
        per_chunk,
    };
    let report = match data {
        TaskData::Qa(v) => {
            let (mut em, mut f1) = (0.0, 0.0);
            for ex in v {
                let (text, chunks) = predict_answer_text(ckpt, tok, ex, chunking)?;
                let golds: Vec<&str> = ex.answers.iter().map(|a| a.text.as_str()).collect();
                let s = qa_em_f1(&text, &golds);
                em += s.em;
                f1 += s.f1;
                let per_chunk = chunks.as_array().cloned().unwrap_or_default();
                records.push(record(&ex.id, json!(text), per_chunk));
            }
            let n = v.len().max(1) as f64;
            EvaluationReport::new(task.name(), v.len()).with("em", em / n).with("f1", f1 / n)
        }
        TaskData::Ner(v) => {
            let mut pairs = Vec::with_capacity(v.len());
            for ex in v {
                let pred = predict_ner(ckpt, tok, ex, chunking)?;
                records.push(record(&ex.id, json!(pred), Vec::new()));
                pairs.push((ex.tags.clone(), pred));
            }
            let s = ner_entity_f1(&pairs)?;
            EvaluationReport::new(task.name(), v.len())
                .with("entity_precision", s.entity.precision)
                .with("entity_recall", s.entity.recall)
                .with("entity_f1", s.entity.f1)
                .with("token_f1", s.token.f1)
        }
        TaskData::Cls(v) => {
            let names = &ckpt.config.label_names;
            let multilabel = matches!(ckpt.config.head, HeadConfig::SeqCls { multilabel: true, .. });
            let mut probs = Vec::with_capacity(v.len());
            let mut golds: Vec<Vec<bool>> = Vec::with_capacity(v.len());
            let mut exact = Vec::with_capacity(v.len());
            for ex in v {
                let (p, chunks) = predict_cls(ckpt, tok, ex, chunking)?;
                let gold: Vec<bool> = match (&ex.labels, &ex.label) {
                    (Some(l), _) => l.iter().map(|&x| x == 1).collect(),
                    (None, Some(lv)) => {
                        let name = match lv {
                            LabelValue::Index(i) => i.to_string(),
                            LabelValue::Name(n) => n.clone(),
                        };
                        let g = label_index(names, &ex.id, &name)?;
                        (0..names.len()).map(|k| k == g).collect()
                    }
                    (None, None) => return Err(example_err(&ex.id, "missing label")),
                };
                let pred: Vec<bool> = if multilabel {
                    p.iter().map(|&x| x >= 0.5).collect()
                } else {
                    let a = argmax(&p);
                    (0..p.len()).map(|k| k == a).collect()
                };
                exact.push(pred == gold);
                records.push(record(&ex.id, json!(p), chunks.into_iter().map(|c| json!(c)).collect()));
                probs.push(p);
                golds.push(gold);
            }
            let mut report = EvaluationReport::new(task.name(), v.len())
                .with("accuracy", exact.iter().filter(|&&x| x).count() as f64 / exact.len().max(1) as f64);
            // AUC over the positive class (binary) or each label (multi-label)
            let label_ids: Vec<usize> = if multilabel {
                (0..names.len()).collect()
            } else if names.len() == 2 {
                vec![1]
            } else {
                Vec::new()
            };
            let mut per_label = Vec::new();
            for k in label_ids {
                let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
                let labels: Vec<bool> = golds.iter().map(|g| g[k]).collect();
                if let Ok(auc) = roc_auc(&scores, &labels) {
                    per_label.push(LabelAuc {
                        auc,
                        positive_count: labels.iter().filter(|&&l| l).count(),
                    });
                }
            }
            if !per_label.is_empty() {
                report = report.with("auc", weighted_mean_auc(&per_label)?);
            }
            report
        }
        TaskData::Nli(v) => {
            let mut preds = Vec::with_capacity(v.len());
            let mut golds = Vec::with_capacity(v.len());
            for ex in v {
                let p = predict_nli(ckpt, tok, ex)?;
                let name = ckpt.config.label_names.get(p).cloned().unwrap_or_default();
                records.push(record(&ex.id, json!(name), Vec::new()));
                preds.push(name);
                golds.push(ex.label.clone());
            }
            EvaluationReport::new(task.name(), v.len()).with("accuracy", accuracy(&preds, &golds)?)
        }
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_ner;

    #[test]
    fn ner_label_space() {
        let data = TaskData::Ner(synth_ner(10, 1));
        let (head, names) = label_space(&data).unwrap();
        assert_eq!(names, ["O", "B-DRUG", "I-DRUG", "B-PER", "I-PER", "B-PROB", "I-PROB"]);
        assert_eq!(head, HeadConfig::TokenCls { num_tags: 7 });
    }
}
