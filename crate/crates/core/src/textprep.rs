//! Note ingestion, cleaning, and synthetic corpus generation.
//!
//! Cleaning is a fixed four-step pipeline:
//!
//! 1. delete de-identification placeholders of the form `[** ... **]`
//! 2. replace every character that is not ASCII alphanumeric or ASCII punctuation with a space
//! 3. lowercase
//! 4. collapse whitespace runs to a single space and trim
//!
//! The synthetic generator produces documents that already satisfy the cleaning
//! invariants and carry a planted cue/target pair a fixed distance apart.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("cannot open corpus {path}: {source}")]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("document {id}: text is not valid UTF-8")]
    InvalidUtf8 { id: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("synthetic corpus configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
}

/// A document whose text satisfies the cleaning invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanDocument {
    pub id: String,
    pub text: String,
}

impl CleanDocument {
    pub fn as_raw(&self) -> RawDocument {
        RawDocument {
            id: self.id.clone(),
            text: self.text.clone(),
        }
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\[\*\*.*?\*\*\]").expect("static regex"))
}

/// Returns true if `text` contains a de-identification placeholder.
pub fn contains_placeholder(text: &str) -> bool {
    placeholder_re().is_match(text)
}

/// Applies the four cleaning steps to a single note.
pub fn clean_note(raw: &RawDocument) -> CleanDocument {
    CleanDocument {
        id: raw.id.clone(),
        text: clean_text(&raw.text),
    }
}

/// Like [`clean_note`] but starts from bytes, rejecting invalid UTF-8.
pub fn clean_note_bytes(id: &str, bytes: &[u8]) -> Result<CleanDocument, TextError> {
    let text = std::str::from_utf8(bytes).map_err(|_| TextError::InvalidUtf8 { id: id.to_string() })?;
    Ok(CleanDocument {
        id: id.to_string(),
        text: clean_text(text),
    })
}

pub fn clean_text(text: &str) -> String {
    // placeholders leave a space behind; step 4 collapses it
    let stripped = placeholder_re().replace_all(text, " ");
    let mut out = String::with_capacity(stripped.len());
    let mut pending_space = false;
    for c in stripped.chars() {
        let keep = c.is_ascii_alphanumeric() || c.is_ascii_punctuation();
        if keep {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c.to_ascii_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Checks the invariants a [`CleanDocument`] text must satisfy.
pub fn is_clean(text: &str) -> bool {
    if text.starts_with(' ') || text.ends_with(' ') || text.contains("  ") {
        return false;
    }
    if contains_placeholder(text) {
        return false;
    }
    text.chars().all(|c| {
        c == ' ' || c.is_ascii_digit() || c.is_ascii_lowercase() || c.is_ascii_punctuation()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    PlainLines,
    Jsonl,
}

/// Streams documents from a corpus file in file order.
pub struct CorpusReader {
    lines: std::io::Split<BufReader<File>>,
    format: CorpusFormat,
    line_no: usize,
    doc_no: usize,
}

impl Iterator for CorpusReader {
    type Item = Result<RawDocument, TextError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let bytes = match self.lines.next()? {
                Ok(b) => b,
                Err(e) => {
                    return Some(Err(TextError::Malformed {
                        line: self.line_no + 1,
                        message: e.to_string(),
                    }))
                }
            };
            self.line_no += 1;
            let bytes = bytes.strip_suffix(b"\r").unwrap_or(&bytes).to_vec();
            match self.format {
                CorpusFormat::PlainLines => {
                    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
                        continue;
                    }
                    let id = format!("line-{}", self.doc_no);
                    self.doc_no += 1;
                    return Some(match String::from_utf8(bytes) {
                        Ok(text) => Ok(RawDocument { id, text }),
                        Err(_) => Err(TextError::InvalidUtf8 { id }),
                    });
                }
                CorpusFormat::Jsonl => {
                    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
                        continue;
                    }
                    let line = self.line_no;
                    let parsed: Result<RawDocument, _> = serde_json::from_slice(&bytes);
                    self.doc_no += 1;
                    return Some(parsed.map_err(|e| TextError::Malformed {
                        line,
                        message: e.to_string(),
                    }));
                }
            }
        }
    }
}

/// Opens a corpus for streaming. Plain-lines documents get ids `line-<k>`
/// counting nonempty lines from zero.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusReader, TextError> {
    let file = File::open(path).map_err(|source| TextError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(CorpusReader {
        lines: BufReader::new(file).split(b'\n'),
        format,
        line_no: 0,
        doc_no: 0,
    })
}

/// Parameters of the synthetic long-dependency corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_docs: usize,
    pub doc_length_tokens: usize,
    pub vocab_words: usize,
    pub dependency_distance: usize,
    /// cue word -> target word
    pub dependency_rules: BTreeMap<String, String>,
    pub seed: u64,
}

impl SynthSpec {
    /// A spec with `num_rules` rules `cue<k> -> tgt<k>`.
    pub fn with_numbered_rules(
        num_docs: usize,
        doc_length_tokens: usize,
        vocab_words: usize,
        dependency_distance: usize,
        num_rules: usize,
        seed: u64,
    ) -> Self {
        let dependency_rules = (0..num_rules)
            .map(|k| (format!("cue{k}"), format!("tgt{k}")))
            .collect();
        Self {
            num_docs,
            doc_length_tokens,
            vocab_words,
            dependency_distance,
            dependency_rules,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TextError> {
        if self.doc_length_tokens == 0 {
            return Err(TextError::Config("doc_length_tokens must be positive".into()));
        }
        if self.dependency_distance == 0 {
            return Err(TextError::Config("dependency_distance must be at least 1".into()));
        }
        if self.dependency_distance >= self.doc_length_tokens {
            return Err(TextError::Config(format!(
                "dependency_distance {} must be below doc_length_tokens {}",
                self.dependency_distance, self.doc_length_tokens
            )));
        }
        if self.vocab_words == 0 {
            return Err(TextError::Config("vocab_words must be positive".into()));
        }
        if self.dependency_rules.is_empty() {
            return Err(TextError::Config("at least one dependency rule is required".into()));
        }
        for (cue, target) in &self.dependency_rules {
            for w in [cue, target] {
                if w.is_empty() || !is_clean(w) || w.contains(' ') {
                    return Err(TextError::Config(format!("rule word {w:?} is not a clean single word")));
                }
            }
        }
        Ok(())
    }

    pub fn filler_word(k: usize) -> String {
        format!("w{k}")
    }
}

/// Where the planted pair sits in a synthetic document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedDependency {
    pub cue_position: usize,
    pub target_position: usize,
    pub cue: String,
    pub target: String,
}

/// Generates the corpus together with the planted positions (word indices).
pub fn synth_corpus_with_plan(
    spec: &SynthSpec,
) -> Result<Vec<(CleanDocument, PlantedDependency)>, TextError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rules: Vec<(&String, &String)> = spec.dependency_rules.iter().collect();
    let fillers: Vec<String> = (0..spec.vocab_words).map(SynthSpec::filler_word).collect();
    let mut docs = Vec::with_capacity(spec.num_docs);
    for d in 0..spec.num_docs {
        let (cue, target) = *rules.choose(&mut rng).expect("nonempty rules");
        let p = rng.gen_range(0..spec.doc_length_tokens - spec.dependency_distance);
        let mut words: Vec<&str> = (0..spec.doc_length_tokens)
            .map(|_| fillers[rng.gen_range(0..fillers.len())].as_str())
            .collect();
        words[p] = cue;
        words[p + spec.dependency_distance] = target;
        docs.push((
            CleanDocument {
                id: format!("synth-{d}"),
                text: words.join(" "),
            },
            PlantedDependency {
                cue_position: p,
                target_position: p + spec.dependency_distance,
                cue: cue.clone(),
                target: target.clone(),
            },
        ));
    }
    Ok(docs)
}

/// Deterministic synthetic corpus with one planted cue/target pair per document.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<CleanDocument>, TextError> {
    Ok(synth_corpus_with_plan(spec)?.into_iter().map(|(d, _)| d).collect())
}
