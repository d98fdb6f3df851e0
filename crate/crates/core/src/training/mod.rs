//! Masked-token corruption, the pretraining loop, masked-prediction
//! evaluation, and task fine-tuning.

mod finetune;

pub use finetune::{
    evaluate_task, finetune, predict_answer_text, prepare_task_model, task_features, Feature, FeatureLabel,
    FinetuneOutcome, TaskPrediction,
};

use std::io::Write;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    init_model, mlm_logits_at, save_checkpoint, encode_sequence, Batch, BoundModel, Checkpoint, CheckpointError,
    HeadConfig, Labels, ModelConfig, ModelError, IGNORE,
};
use crate::tensor::{adamw_step, AdamWConfig, Graph, LrSchedule, OptimizerState, Tensor, TensorError};
use crate::textprep::{CleanDocument, PlantedDependency};
use crate::tokenizer::{is_special, BpeModel, TokenId, CLS, MASK, NUM_SPECIAL, SEP};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("sequence has no maskable token")]
    NoEligibleTokens,
    #[error("no masked positions to evaluate")]
    EmptyMaskedSet,
    #[error("tokenizer has {tokenizer} ids but the model expects {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("record {id}: {message}")]
    Example { id: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    LongDoc(#[from] crate::longdoc::LongDocError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("log: {0}")]
    Io(#[from] std::io::Error),
}

/// Fraction of eligible positions to corrupt, and how: replace with MASK,
/// replace with a random token, or keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingScheme {
    pub mask_rate: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for MaskingScheme {
    fn default() -> Self {
        Self::training(0)
    }
}

impl MaskingScheme {
    /// 15% of tokens, 80/10/10.
    pub fn training(seed: u64) -> Self {
        Self {
            mask_rate: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            seed,
        }
    }

    /// Pure MASK replacement at `rate`.
    pub fn evaluation(rate: f64, seed: u64) -> Self {
        Self {
            mask_rate: rate,
            mask_fraction: 1.0,
            random_fraction: 0.0,
            keep_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let split = self.mask_fraction + self.random_fraction + self.keep_fraction;
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(TrainError::Config(format!("mask_rate {} outside (0, 1]", self.mask_rate)));
        }
        if [self.mask_fraction, self.random_fraction, self.keep_fraction].iter().any(|&f| f < 0.0)
            || (split - 1.0).abs() > 1e-9
        {
            return Err(TrainError::Config("action split must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Number of positions masked for `eligible` candidates: `round(rate·eligible)`,
/// at least one.
pub fn masked_count(rate: f64, eligible: usize) -> usize {
    ((rate * eligible as f64).round() as usize).clamp(1, eligible.max(1))
}

/// Returns the corrupted ids and per-position labels (original id at
/// selected positions, [`IGNORE`] elsewhere). Specials and padding are never
/// selected; random replacements are drawn from non-special ids below
/// `vocab_size`.
pub fn apply_mlm_masking(
    ids: &[TokenId],
    scheme: &MaskingScheme,
    vocab_size: usize,
) -> Result<(Vec<TokenId>, Vec<usize>), TrainError> {
    scheme.validate()?;
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    if eligible.is_empty() {
        return Err(TrainError::NoEligibleTokens);
    }
    let count = masked_count(scheme.mask_rate, eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
    let mut chosen: Vec<usize> = sample(&mut rng, eligible.len(), count).into_iter().map(|k| eligible[k]).collect();
    chosen.sort_unstable();
    let mut corrupted = ids.to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    for i in chosen {
        labels[i] = ids[i] as usize;
        let u: f64 = rng.gen();
        if u < scheme.mask_fraction {
            corrupted[i] = MASK;
        } else if u < scheme.mask_fraction + scheme.random_fraction && vocab_size > NUM_SPECIAL as usize {
            corrupted[i] = rng.gen_range(NUM_SPECIAL as TokenId..vocab_size as TokenId);
        }
    }
    Ok((corrupted, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearWarmupDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: u64,
    /// Optimizer steps for pretraining; fine-tuning derives its own from
    /// `epochs`.
    pub total_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_accum_steps: usize,
    /// Evaluate every this many steps (0 disables).
    pub eval_every: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 0.01,
            schedule: ScheduleKind::LinearWarmupDecay,
            warmup_steps: 0,
            total_steps: 100,
            batch_size: 8,
            epochs: 6,
            grad_accum_steps: 1,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(TrainError::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("lr and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn schedule_for(&self, total_steps: u64) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::LinearWarmupDecay => LrSchedule::LinearWarmupDecay {
                warmup_steps: self.warmup_steps,
                total_steps,
            },
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One optimizer update from the mean gradient of `batches`.
pub fn train_step(
    ckpt: &mut Checkpoint,
    batches: &[Batch],
    train: &TrainConfig,
    schedule: &LrSchedule,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let state = ckpt
        .optimizer
        .get_or_insert_with(|| OptimizerState::new(train.adamw(), ckpt.params.tensors()));
    state.config = AdamWConfig {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..state.config
    };
    let mut total: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    for (k, b) in batches.iter().enumerate() {
        let (l, grads) = ckpt.loss_and_gradients(b, Some(mix(&[dropout_seed, k as u64])))?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let n = batches.len() as f64;
    let mut grads = total.ok_or_else(|| TrainError::Config("no batches".into()))?;
    if batches.len() > 1 {
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x /= n));
    }
    let factor = schedule.factor(ckpt.step);
    let state = ckpt.optimizer.as_mut().expect("set above");
    adamw_step(ckpt.params.tensors_mut(), &grads, state, factor, ckpt.config.precision)?;
    ckpt.step += 1;
    Ok(loss / n)
}

/// Concatenates documents with SEP between them and cuts the stream into
/// sequences of `max_len` tokens, each starting with CLS.
pub fn pack_documents(docs: &[Vec<TokenId>], max_len: usize) -> Vec<Vec<TokenId>> {
    let body = max_len.saturating_sub(1).max(1);
    let mut stream = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(SEP);
        }
        stream.extend_from_slice(d);
    }
    stream
        .chunks(body)
        .filter(|c| c.iter().any(|&t| !is_special(t)))
        .map(|c| {
            let mut s = Vec::with_capacity(c.len() + 1);
            s.push(CLS);
            s.extend_from_slice(c);
            s
        })
        .collect()
}

/// JSONL metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub split: String,
    pub loss: Option<f64>,
    #[serde(flatten)]
    pub metrics: std::collections::BTreeMap<String, f64>,
}

#[derive(Default)]
pub struct RunHooks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the checkpoint reaches this step, even if the schedule runs
    /// longer.
    pub stop_at: Option<u64>,
    /// Held-out sequences evaluated every `eval_every` steps.
    pub eval_sequences: Option<&'a [Vec<TokenId>]>,
}

fn log_line(hooks: &mut RunHooks<'_>, rec: &LogRecord) -> Result<(), TrainError> {
    if let Some(w) = hooks.log.as_mut() {
        serde_json::to_writer(&mut **w, rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn picks(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    }
}

fn require_mlm_head(ckpt: &Checkpoint) -> Result<(), TrainError> {
    if ckpt.config.head != HeadConfig::Mlm {
        return Err(ModelError::HeadMismatch {
            have: ckpt.config.head.name(),
            want: "mlm",
        }
        .into());
    }
    Ok(())
}

/// Shared step loop: `make_batch(step, micro)` builds each micro-batch.
fn run_steps(
    mut ckpt: Checkpoint,
    train: &TrainConfig,
    hooks: &mut RunHooks<'_>,
    mut make_batch: impl FnMut(u64, u64) -> Result<Batch, TrainError>,
) -> Result<Checkpoint, TrainError> {
    let schedule = train.schedule_for(train.total_steps);
    let end = hooks.stop_at.map_or(train.total_steps, |s| s.min(train.total_steps));
    while ckpt.step < end {
        let step = ckpt.step;
        let batches = (0..train.grad_accum_steps as u64)
            .map(|micro| make_batch(step, micro))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = train_step(&mut ckpt, &batches, train, &schedule, mix(&[train.seed, step, u64::MAX]))?;
        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert("lr".to_string(), train.lr * schedule.factor(step));
        log_line(
            hooks,
            &LogRecord {
                step: ckpt.step,
                split: "train".into(),
                loss: Some(loss),
                metrics,
            },
        )?;
        if train.eval_every > 0 && ckpt.step % train.eval_every == 0 {
            if let Some(eval) = hooks.eval_sequences {
                let r = evaluate_mlm(&ckpt, eval, ckpt.config.max_positions, 0.10, train.seed)?;
                let metrics = [
                    ("perplexity".to_string(), r.perplexity),
                    ("top5_accuracy".to_string(), r.top5_accuracy),
                ]
                .into_iter()
                .collect();
                log_line(
                    hooks,
                    &LogRecord {
                        step: ckpt.step,
                        split: "dev".into(),
                        loss: Some(r.mean_nll),
                        metrics,
                    },
                )?;
            }
        }
        if train.checkpoint_every > 0 && ckpt.step % train.checkpoint_every == 0 {
            if let Some(dir) = &hooks.checkpoint_dir {
                save_checkpoint(&ckpt, &dir.join(format!("step-{}", ckpt.step)))?;
            }
        }
    }
    Ok(ckpt)
}

/// MLM pretraining on packed `sequences` from `ckpt.step` up to
/// `train.total_steps`. Everything random in a step derives from
/// `(train.seed, step)`, so a run resumed from a saved checkpoint follows the
/// uninterrupted run exactly.
pub fn pretrain_mlm(
    ckpt: Checkpoint,
    sequences: &[Vec<TokenId>],
    train: &TrainConfig,
    masking: &MaskingScheme,
    mut hooks: RunHooks<'_>,
) -> Result<Checkpoint, TrainError> {
    train.validate()?;
    masking.validate()?;
    require_mlm_head(&ckpt)?;
    if sequences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let vocab = ckpt.config.vocab_size;
    run_steps(ckpt, train, &mut hooks, |step, micro| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[train.seed, step, micro]));
        let chosen = picks(&mut rng, sequences.len(), train.batch_size);
        let len = chosen.iter().map(|&i| sequences[i].len()).max().unwrap_or(0);
        let mut seqs = Vec::with_capacity(chosen.len());
        let mut labels = Vec::new();
        for (b, &i) in chosen.iter().enumerate() {
            let scheme = MaskingScheme {
                seed: mix(&[masking.seed, step, micro, b as u64]),
                ..*masking
            };
            let (corrupted, mut l) = apply_mlm_masking(&sequences[i], &scheme, vocab)?;
            l.resize(len, IGNORE);
            labels.extend(l);
            seqs.push(corrupted);
        }
        let globals = vec![vec![0]; seqs.len()];
        Ok(Batch::from_sequences(&seqs, &globals, Labels::Mlm(labels)))
    })
}

/// MLM training on inputs whose corrupted positions are fixed in advance,
/// e.g. only the tokens a probe task asks about.
pub fn pretrain_masked_items(
    ckpt: Checkpoint,
    items: &[MaskedItem],
    train: &TrainConfig,
    mut hooks: RunHooks<'_>,
) -> Result<Checkpoint, TrainError> {
    train.validate()?;
    require_mlm_head(&ckpt)?;
    if items.iter().all(|i| i.positions.is_empty()) {
        return Err(TrainError::EmptyMaskedSet);
    }
    run_steps(ckpt, train, &mut hooks, |step, micro| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[train.seed, step, micro]));
        let chosen = picks(&mut rng, items.len(), train.batch_size);
        let len = chosen.iter().map(|&i| items[i].ids.len()).max().unwrap_or(0);
        let mut labels = vec![IGNORE; chosen.len() * len];
        for (b, &i) in chosen.iter().enumerate() {
            for (&p, &t) in items[i].positions.iter().zip(&items[i].targets) {
                labels[b * len + p] = t;
            }
        }
        let seqs: Vec<Vec<TokenId>> = chosen.iter().map(|&i| items[i].ids.clone()).collect();
        let globals = vec![vec![0]; seqs.len()];
        Ok(Batch::from_sequences(&seqs, &globals, Labels::Mlm(labels)))
    })
}

/// Tokenizes raw documents, packs them to the model length, initializes the
/// model from `seed`, and pretrains.
pub fn pretrain_from_corpus(
    corpus: &[String],
    tokenizer: &BpeModel,
    model_config: &ModelConfig,
    train: &TrainConfig,
    masking: &MaskingScheme,
    hooks: RunHooks<'_>,
) -> Result<Checkpoint, TrainError> {
    if tokenizer.vocab_size() != model_config.vocab_size {
        return Err(TrainError::VocabMismatch {
            tokenizer: tokenizer.vocab_size(),
            model: model_config.vocab_size,
        });
    }
    let docs: Vec<Vec<TokenId>> = corpus.iter().map(|d| tokenizer.encode(d, false)).collect();
    let sequences = pack_documents(&docs, model_config.max_positions);
    let ckpt = init_model(model_config, train.seed)?;
    pretrain_mlm(ckpt, &sequences, train, masking, hooks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmEvalReport {
    pub perplexity: f64,
    pub top5_accuracy: f64,
    pub masked_position_count: usize,
    pub mean_nll: f64,
}

/// Accumulates negative log-likelihood and top-5 hits over logit rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct MlmScorer {
    nll: f64,
    hits: usize,
    count: usize,
}

impl MlmScorer {
    /// `logits` is `[N × V]`, one row per target.
    pub fn add(&mut self, logits: &Tensor, targets: &[usize]) {
        let v = logits.shape()[1];
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * v..(r + 1) * v];
            self.nll += crate::tensor::log_sum_exp(row) - row[t];
            // rank with ties broken toward lower ids
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &x)| x > row[t] || (x == row[t] && j < t))
                .count();
            self.hits += (rank < 5) as usize;
            self.count += 1;
        }
    }

    pub fn report(&self) -> Result<MlmEvalReport, TrainError> {
        if self.count == 0 {
            return Err(TrainError::EmptyMaskedSet);
        }
        let mean_nll = self.nll / self.count as f64;
        Ok(MlmEvalReport {
            perplexity: mean_nll.exp(),
            top5_accuracy: self.hits as f64 / self.count as f64,
            masked_position_count: self.count,
            mean_nll,
        })
    }
}

/// An input sequence with the positions to score and their true ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedItem {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Scores MLM predictions at given positions. Inputs are used as given
/// (the caller places MASK where wanted); CLS is global.
pub fn evaluate_mlm_items(ckpt: &Checkpoint, items: &[MaskedItem]) -> Result<MlmEvalReport, TrainError> {
    let mut scorer = MlmScorer::default();
    for item in items {
        if item.positions.is_empty() {
            continue;
        }
        let batch = Batch::from_sequences(&[item.ids.clone()], &[vec![0]], Labels::None);
        let mut g = Graph::new();
        let model = BoundModel::attach(&mut g, &ckpt.config, &ckpt.params, false);
        let h = encode_sequence(&mut g, &model, &batch, None)?;
        let logits = mlm_logits_at(&mut g, &model, h, &item.positions)?;
        scorer.add(g.value(logits), &item.targets);
    }
    scorer.report()
}

/// One masked item per planted document: CLS plus the document with the
/// target word replaced by MASK. With `window`, the input is cut to that many
/// tokens (CLS included) around the target, leaving the cue outside.
/// Words are encoded with their leading space, and each must be exactly
/// one token.
pub fn dependency_items(
    docs: &[(CleanDocument, PlantedDependency)],
    tokenizer: &BpeModel,
    window: Option<usize>,
) -> Result<Vec<MaskedItem>, TrainError> {
    let mut items = Vec::with_capacity(docs.len());
    for (doc, plan) in docs {
        let ids = tokenizer.encode(&format!(" {}", doc.text), false);
        let words = doc.text.split(' ').count();
        if ids.len() != words {
            return Err(TrainError::Example {
                id: doc.id.clone(),
                message: format!("{words} words encode to {} tokens", ids.len()),
            });
        }
        let (cue, t) = (plan.cue_position, plan.target_position);
        let target = ids[t] as usize;
        let (start, end) = match window {
            None => (0, ids.len()),
            Some(w) => {
                let keep = w.saturating_sub(1);
                if keep == 0 || t - cue < keep {
                    return Err(TrainError::Config(format!(
                        "a {w}-token window cannot hold the target without the cue"
                    )));
                }
                let start = t.saturating_sub(keep / 2).min(ids.len().saturating_sub(keep)).max(cue + 1);
                (start, (start + keep).min(ids.len()))
            }
        };
        let mut seq = vec![CLS];
        seq.extend_from_slice(&ids[start..end]);
        let position = t - start + 1;
        seq[position] = MASK;
        items.push(MaskedItem {
            ids: seq,
            positions: vec![position],
            targets: vec![target],
        });
    }
    Ok(items)
}

/// Each document is truncated so that with a leading CLS it has at most
/// `truncate_to` tokens (and fits the model), then `mask_rate` of its
/// eligible tokens are replaced by MASK and scored.
pub fn evaluate_mlm(
    ckpt: &Checkpoint,
    docs: &[Vec<TokenId>],
    truncate_to: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MlmEvalReport, TrainError> {
    let keep = truncate_to.min(ckpt.config.max_positions).saturating_sub(1);
    let mut items = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let mut seq = vec![CLS];
        seq.extend_from_slice(&doc[..doc.len().min(keep)]);
        let scheme = MaskingScheme::evaluation(mask_rate, mix(&[seed, d as u64]));
        let (corrupted, labels) = match apply_mlm_masking(&seq, &scheme, ckpt.config.vocab_size) {
            Ok(x) => x,
            Err(TrainError::NoEligibleTokens) => continue,
            Err(e) => return Err(e),
        };
        let positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE).collect();
        let targets = positions.iter().map(|&i| labels[i]).collect();
        items.push(MaskedItem {
            ids: corrupted,
            positions,
            targets,
        });
    }
    evaluate_mlm_items(ckpt, &items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_eligible_at_ten_percent() {
        let ids: Vec<TokenId> = std::iter::once(CLS).chain((0..20).map(|i| 10 + i)).chain([SEP]).collect();
        let (c, l) = apply_mlm_masking(&ids, &MaskingScheme::evaluation(0.10, 3), 100).unwrap();
        assert_eq!(l.iter().filter(|&&x| x != IGNORE).count(), 2);
        assert_eq!(c.iter().filter(|&&x| x == MASK).count(), 2);
        assert_eq!(l[0], IGNORE);
    }

    #[test]
    fn full_rate_masks_everything() {
        let ids: Vec<TokenId> = vec![CLS, 7, 8, 9, SEP];
        let (c, _) = apply_mlm_masking(&ids, &MaskingScheme::evaluation(1.0, 0), 100).unwrap();
        assert_eq!(c, [CLS, MASK, MASK, MASK, SEP]);
        assert!(matches!(
            apply_mlm_masking(&[CLS, SEP], &MaskingScheme::evaluation(0.5, 0), 100),
            Err(TrainError::NoEligibleTokens)
        ));
    }

    #[test]
    fn masking_deterministic() {
        let ids: Vec<TokenId> = (4..200).collect();
        let s = MaskingScheme::training(9);
        assert_eq!(apply_mlm_masking(&ids, &s, 300).unwrap(), apply_mlm_masking(&ids, &s, 300).unwrap());
    }

    #[test]
    fn packing() {
        let docs = vec![vec![10, 11, 12], vec![13, 14]];
        assert_eq!(pack_documents(&docs, 4), [vec![CLS, 10, 11, 12], vec![CLS, SEP, 13, 14]]);
        assert_eq!(pack_documents(&docs, 16), [vec![CLS, 10, 11, 12, SEP, 13, 14]]);
    }

    #[test]
    fn scorer_examples() {
        let uniform = Tensor::zeros(&[3, 100]);
        let mut s = MlmScorer::default();
        s.add(&uniform, &[0, 50, 99]);
        let r = s.report().unwrap();
        assert!((r.perplexity - 100.0).abs() < 1e-9);
        // ties favor lower ids: only id 0 is inside the top five
        assert!((r.top5_accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!(MlmScorer::default().report().is_err());
    }
}
