//! JSONL task datasets (extractive QA, IOB tagging, document classification,
//! sentence-pair inference) and small synthetic generators for each.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("record {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SpanQa,
    TokenCls,
    SeqCls,
    Nli,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SpanQa => "span_qa",
            Task::TokenCls => "token_cls",
            Task::SeqCls => "seq_cls",
            Task::Nli => "nli",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub text: String,
    /// Character (not byte) index into the context.
    pub start_char: usize,
}

impl QaAnswer {
    /// Byte range of the answer in `context`, if the text is found there.
    pub fn byte_range(&self, context: &str) -> Option<std::ops::Range<usize>> {
        let start = if self.start_char == context.chars().count() {
            context.len()
        } else {
            context.char_indices().nth(self.start_char)?.0
        };
        let end = start + self.text.len();
        (context.get(start..end) == Some(self.text.as_str())).then_some(start..end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<QaAnswer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Index(usize),
    Name(String),
}

/// Either a multi-hot `labels` vector or a single `label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsExample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelValue>,
}

pub const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskData {
    Qa(Vec<QaExample>),
    Ner(Vec<NerExample>),
    Cls(Vec<ClsExample>),
    Nli(Vec<NliExample>),
}

impl TaskData {
    pub fn task(&self) -> Task {
        match self {
            TaskData::Qa(_) => Task::SpanQa,
            TaskData::Ner(_) => Task::TokenCls,
            TaskData::Cls(_) => Task::SeqCls,
            TaskData::Nli(_) => Task::Nli,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskData::Qa(v) => v.len(),
            TaskData::Ner(v) => v.len(),
            TaskData::Cls(v) => v.len(),
            TaskData::Nli(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(task: Task, path: &Path) -> Result<Self, DatasetError> {
        let data = match task {
            Task::SpanQa => TaskData::Qa(read_jsonl(path)?),
            Task::TokenCls => TaskData::Ner(read_jsonl(path)?),
            Task::SeqCls => TaskData::Cls(read_jsonl(path)?),
            Task::Nli => TaskData::Nli(read_jsonl(path)?),
        };
        data.validate()?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        match self {
            TaskData::Qa(v) => write_jsonl(path, v),
            TaskData::Ner(v) => write_jsonl(path, v),
            TaskData::Cls(v) => write_jsonl(path, v),
            TaskData::Nli(v) => write_jsonl(path, v),
        }
    }

    /// Structural checks, reported with the offending record id.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |id: &str, message: String| {
            Err(DatasetError::Invalid {
                id: id.to_string(),
                message,
            })
        };
        match self {
            TaskData::Qa(v) => {
                for ex in v {
                    if ex.answers.is_empty() {
                        return bad(&ex.id, "no answers".into());
                    }
                    for a in &ex.answers {
                        if a.byte_range(&ex.context).is_none() {
                            return bad(&ex.id, format!("answer {:?} not found at char {}", a.text, a.start_char));
                        }
                    }
                }
            }
            TaskData::Ner(v) => {
                for ex in v {
                    if ex.tokens.len() != ex.tags.len() {
                        return bad(&ex.id, format!("{} tokens but {} tags", ex.tokens.len(), ex.tags.len()));
                    }
                    if ex.tokens.is_empty() {
                        return bad(&ex.id, "no tokens".into());
                    }
                    if let Some(t) = ex.tags.iter().find(|t| !is_iob(t)) {
                        return bad(&ex.id, format!("tag {t:?} is not IOB"));
                    }
                }
            }
            TaskData::Cls(v) => {
                let width = v.first().and_then(|e| e.labels.as_ref().map(|l| l.len()));
                for ex in v {
                    match (&ex.labels, &ex.label) {
                        (Some(l), None) => {
                            if Some(l.len()) != width || l.iter().any(|&x| x > 1) {
                                return bad(&ex.id, "labels must be 0/1 vectors of one width".into());
                            }
                        }
                        (None, Some(_)) if width.is_none() => {}
                        _ => return bad(&ex.id, "need exactly one of `labels` or `label`, consistently".into()),
                    }
                }
            }
            TaskData::Nli(v) => {
                for ex in v {
                    if !NLI_LABELS.contains(&ex.label.as_str()) {
                        return bad(&ex.id, format!("label {:?} not in {NLI_LABELS:?}", ex.label));
                    }
                }
            }
        }
        Ok(())
    }
}

fn is_iob(tag: &str) -> bool {
    tag == "O" || ((tag.starts_with("B-") || tag.starts_with("I-")) && tag.len() > 2)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| io(e.into()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

// ---- synthetic sets ------------------------------------------------------

fn fillers(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}

/// Contexts of filler words containing one `code tgtK` phrase; the question
/// asks for the code.
pub fn synth_qa(n: usize, context_words: usize, seed: u64) -> Vec<QaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut words = fillers(&mut rng, context_words.max(3), 30);
            let at = rng.gen_range(0..words.len() - 1);
            let answer = format!("tgt{}", rng.gen_range(0..10));
            words[at] = "code".into();
            words[at + 1] = answer.clone();
            let context = words.join(" ");
            let start_char = words[..at + 1].iter().map(|w| w.len() + 1).sum();
            QaExample {
                id: format!("qa-{i}"),
                context,
                question: "what is the code".into(),
                answers: vec![QaAnswer {
                    text: answer,
                    start_char,
                }],
            }
        })
        .collect()
}

const PEOPLE: [&str; 4] = ["alice", "bruno", "chen", "dara"];
const DRUGS: [&str; 4] = ["aspirin", "heparin", "insulin", "warfarin"];
const PROBLEMS: [[&str; 2]; 3] = [["heart", "failure"], ["renal", "injury"], ["sepsis", "shock"]];

/// Sentences of fillers with person (`PER`), drug (`DRUG`), and two-word
/// problem (`PROB`) mentions.
pub fn synth_ner(n: usize, seed: u64) -> Vec<NerExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            let len = rng.gen_range(8..14);
            while tokens.len() < len {
                match rng.gen_range(0..6) {
                    0 => {
                        tokens.push(PEOPLE.choose(&mut rng).unwrap().to_string());
                        tags.push("B-PER".to_string());
                    }
                    1 => {
                        tokens.push(DRUGS.choose(&mut rng).unwrap().to_string());
                        tags.push("B-DRUG".to_string());
                    }
                    2 => {
                        let p = PROBLEMS.choose(&mut rng).unwrap();
                        tokens.extend(p.iter().map(|s| s.to_string()));
                        tags.extend(["B-PROB".to_string(), "I-PROB".to_string()]);
                    }
                    _ => {
                        tokens.push(format!("w{}", rng.gen_range(0..30)));
                        tags.push("O".to_string());
                    }
                }
            }
            NerExample {
                id: format!("ner-{i}"),
                tokens,
                tags,
            }
        })
        .collect()
}

/// Filler text where the label is the presence of `fever` (single label)
/// or of each keyword in `fever`, `cough`, `rash` (multi-label).
pub fn synth_cls(n: usize, words: usize, multilabel: bool, seed: u64) -> Vec<ClsExample> {
    const KEYS: [&str; 3] = ["fever", "cough", "rash"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut text = fillers(&mut rng, words.max(4), 30);
            let present: Vec<u8> = if multilabel {
                // every label sees both classes across a small set
                KEYS.iter().enumerate().map(|(k, _)| ((i >> k) & 1) as u8).collect()
            } else {
                vec![(i % 2) as u8]
            };
            for (k, &p) in present.iter().enumerate() {
                if p == 1 {
                    let at = rng.gen_range(0..text.len());
                    text[at] = KEYS[k].to_string();
                }
            }
            ClsExample {
                id: format!("cls-{i}"),
                text: text.join(" "),
                labels: multilabel.then(|| present.clone()),
                label: (!multilabel).then(|| LabelValue::Index(present[0] as usize)),
            }
        })
        .collect()
}

/// Premise `patient has X`; the hypothesis restates, negates, or swaps
/// the finding.
pub fn synth_nli(n: usize, seed: u64) -> Vec<NliExample> {
    const FINDINGS: [&str; 5] = ["fever", "cough", "rash", "edema", "anemia"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x = rng.gen_range(0..FINDINGS.len());
            let y = (x + rng.gen_range(1..FINDINGS.len())) % FINDINGS.len();
            let label = NLI_LABELS[i % 3];
            let hypothesis = match label {
                "entailment" => format!("patient has {}", FINDINGS[x]),
                "contradiction" => format!("patient has no {}", FINDINGS[x]),
                _ => format!("patient has {}", FINDINGS[y]),
            };
            NliExample {
                id: format!("nli-{i}"),
                premise: format!("patient has {}", FINDINGS[x]),
                hypothesis,
                label: label.to_string(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_sets_validate() {
        TaskData::Qa(synth_qa(20, 12, 1)).validate().unwrap();
        TaskData::Ner(synth_ner(20, 1)).validate().unwrap();
        TaskData::Cls(synth_cls(20, 10, false, 1)).validate().unwrap();
        TaskData::Cls(synth_cls(20, 10, true, 1)).validate().unwrap();
        TaskData::Nli(synth_nli(20, 1)).validate().unwrap();
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for data in [
            TaskData::Qa(synth_qa(3, 8, 2)),
            TaskData::Ner(synth_ner(3, 2)),
            TaskData::Cls(synth_cls(3, 8, true, 2)),
            TaskData::Cls(synth_cls(3, 8, false, 2)),
            TaskData::Nli(synth_nli(3, 2)),
        ] {
            let p = dir.path().join("d.jsonl");
            data.save(&p).unwrap();
            assert_eq!(TaskData::load(data.task(), &p).unwrap(), data);
        }
    }

    #[test]
    fn malformed_records_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ner.jsonl");
        std::fs::write(&p, "{\"id\":\"r7\",\"tokens\":[\"a\"],\"tags\":[\"O\",\"O\"]}\n").unwrap();
        let err = TaskData::load(Task::TokenCls, &p).unwrap_err().to_string();
        assert!(err.contains("r7"), "{err}");
        std::fs::write(&p, "{\"id\":1}\n").unwrap();
        assert!(matches!(TaskData::load(Task::TokenCls, &p), Err(DatasetError::Parse { line: 1, .. })));
    }
}
