//! Extractive QA exact match and token F1, IOB entity F1, ROC-AUC, weighted
//! mean AUC, and accuracy.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("AUC undefined: need at least one positive and one negative")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("malformed tag {0:?}")]
    BadTag(String),
    #[error("invalid weight {0}")]
    BadWeight(f64),
}

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

/// Lowercase, drop ASCII punctuation and English articles, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaScore {
    pub em: f64,
    pub f1: f64,
}

fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.len() == gold.len() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best exact match and token F1 over the gold variants, after
/// [`normalize_answer`].
pub fn qa_em_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> QaScore {
    qa_em_f1_with(pred, golds, normalize_answer)
}

/// Same scoring with only whitespace tokenization, no normalization.
pub fn qa_em_f1_raw<S: AsRef<str>>(pred: &str, golds: &[S]) -> QaScore {
    qa_em_f1_with(pred, golds, |s| s.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn qa_em_f1_with<S: AsRef<str>>(pred: &str, golds: &[S], norm: impl Fn(&str) -> String) -> QaScore {
    let np = norm(pred);
    let pt: Vec<&str> = np.split_whitespace().collect();
    let mut best = QaScore { em: 0.0, f1: 0.0 };
    for g in golds {
        let ng = norm(g.as_ref());
        let gt: Vec<&str> = ng.split_whitespace().collect();
        if np == ng {
            best.em = 1.0;
        }
        best.f1 = best.f1.max(token_f1(&pt, &gt));
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<Tag<'_>, MetricError> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t)),
        _ => Err(MetricError::BadTag(tag.to_string())),
    }
}

/// Entity spans from IOB tags. An `I-t` that does not continue a `t` entity
/// opens a new one.
pub fn decode_iob<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Entity>, MetricError> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    let close = |open: &mut Option<(String, usize)>, out: &mut Vec<Entity>, end: usize| {
        if let Some((kind, start)) = open.take() {
            out.push(Entity { kind, start, end });
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref())? {
            Tag::Outside => close(&mut open, &mut out, i),
            Tag::Begin(t) => {
                close(&mut open, &mut out, i);
                open = Some((t.to_string(), i));
            }
            Tag::Inside(t) => {
                if open.as_ref().is_none_or(|(k, _)| k != t) {
                    close(&mut open, &mut out, i);
                    open = Some((t.to_string(), i));
                }
            }
        }
    }
    close(&mut open, &mut out, tags.len());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NerScore {
    pub entity: PrfScore,
    /// Per-token scores over entity types, ignoring B/I distinctions;
    /// `O` tokens are negatives.
    pub token: PrfScore,
}

/// Micro-averaged entity-level F1 over `(gold, predicted)` tag sequences.
/// When neither side has any entity the score is 1.
pub fn ner_entity_f1<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<NerScore, MetricError> {
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    let (mut ttp, mut tn_pred, mut tn_gold) = (0, 0, 0);
    for (gold, pred) in pairs {
        if gold.len() != pred.len() {
            return Err(MetricError::LengthMismatch {
                left: gold.len(),
                right: pred.len(),
            });
        }
        let g: HashSet<Entity> = decode_iob(gold)?.into_iter().collect();
        let p: HashSet<Entity> = decode_iob(pred)?.into_iter().collect();
        tp += g.intersection(&p).count();
        n_pred += p.len();
        n_gold += g.len();
        for (gt, pt) in gold.iter().zip(pred) {
            let kind = |t: &str| t.split_once('-').map(|(_, k)| k.to_string());
            let (gk, pk) = (kind(gt.as_ref()), kind(pt.as_ref()));
            tn_gold += gk.is_some() as usize;
            tn_pred += pk.is_some() as usize;
            ttp += (gk.is_some() && gk == pk) as usize;
        }
    }
    Ok(NerScore {
        entity: PrfScore::from_counts(tp, n_pred, n_gold),
        token: PrfScore::from_counts(ttp, tn_pred, tn_gold),
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // U = Σ over positives of (#negatives below + ½ #negatives tied)
    let mut u = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let gp = group.iter().filter(|&&k| labels[k]).count();
        let gn = group.len() - gp;
        u += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAuc {
    pub auc: f64,
    pub positive_count: usize,
}

/// Positive-count weighted average of per-label AUCs.
pub fn weighted_mean_auc(per_label: &[LabelAuc]) -> Result<f64, MetricError> {
    if per_label.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(l) = per_label.iter().find(|l| l.positive_count == 0) {
        return Err(MetricError::BadWeight(l.positive_count as f64));
    }
    let total: f64 = per_label.iter().map(|l| l.positive_count as f64).sum();
    Ok(per_label.iter().map(|l| l.auc * l.positive_count as f64).sum::<f64>() / total)
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

/// `{task, metrics, n_examples}` as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
}

impl EvaluationReport {
    pub fn new(task: impl Into<String>, n_examples: usize) -> Self {
        Self {
            task: task.into(),
            metrics: BTreeMap::new(),
            n_examples,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qa_examples() {
        assert_eq!(qa_em_f1("the cat", &["the cat"]), QaScore { em: 1.0, f1: 1.0 });
        assert_eq!(qa_em_f1("a cat", &["the cat"]), QaScore { em: 1.0, f1: 1.0 });
        assert_eq!(qa_em_f1_raw("big cat", &["the cat"]), QaScore { em: 0.0, f1: 0.5 });
        // articles are dropped before counting: {big, cat} vs {cat}
        assert_eq!(qa_em_f1("big cat", &["the cat"]).f1, 2.0 / 3.0);
        assert_eq!(qa_em_f1("", &["x"]), QaScore { em: 0.0, f1: 0.0 });
        assert_eq!(qa_em_f1("", &[""]), QaScore { em: 1.0, f1: 1.0 });
        assert_eq!(qa_em_f1("Cat!", &["dog", "the  cat."]).em, 1.0);
    }

    #[test]
    fn ner_examples() {
        let v = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let s = ner_entity_f1(&[(v("B-PER I-PER O B-LOC"), v("B-PER I-PER O O"))]).unwrap();
        assert_eq!(s.entity.precision, 1.0);
        assert_eq!(s.entity.recall, 0.5);
        assert_eq!(s.entity.f1, 2.0 / 3.0);
        let same = ner_entity_f1(&[(v("B-PER I-PER O B-LOC"), v("B-PER I-PER O B-LOC"))]).unwrap();
        assert_eq!(same.entity.f1, 1.0);
        let none = ner_entity_f1(&[(v("B-PER O"), v("O O"))]).unwrap();
        assert_eq!((none.entity.precision, none.entity.f1), (0.0, 0.0));
        assert!(ner_entity_f1(&[(v("O O"), v("O"))]).is_err());
        assert!(ner_entity_f1(&[(v("X-PER"), v("O"))]).is_err());
    }

    #[test]
    fn lenient_iob() {
        let e = decode_iob(&["I-LOC", "I-LOC", "I-PER", "O", "I-PER"]).unwrap();
        let spans: Vec<_> = e.iter().map(|e| (e.kind.as_str(), e.start, e.end)).collect();
        assert_eq!(spans, [("LOC", 0, 2), ("PER", 2, 3), ("PER", 4, 5)]);
    }

    #[test]
    fn auc_examples() {
        let auc = roc_auc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8], &[false, false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.3, 0.4], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn weighted_auc_examples() {
        let l = |auc, positive_count| LabelAuc { auc, positive_count };
        assert_eq!(weighted_mean_auc(&[l(0.7, 4)]).unwrap(), 0.7);
        assert_eq!(weighted_mean_auc(&[l(1.0, 1), l(0.5, 3)]).unwrap(), 0.625);
        assert_eq!(weighted_mean_auc(&[l(0.6, 2), l(0.8, 2)]).unwrap(), 0.7);
        assert_eq!(weighted_mean_auc(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b", "c"], &["a", "x", "c"]).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }
}
