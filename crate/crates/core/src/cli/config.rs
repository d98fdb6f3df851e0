use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind};
use crate::datasets::Task;
use crate::longdoc::ChunkingConfig;
use crate::model::{HeadConfig, ModelConfig};
use crate::tensor::Precision;
use crate::textprep::{CorpusFormat, SynthSpec};
use crate::training::{MaskingScheme, TrainConfig};

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub paths: PathsConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub masking: MaskingScheme,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub task: TaskSection,
    pub chunking: ChunkingConfig,
    pub evaluation: EvaluationSection,
    pub synth: SynthSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            masking: MaskingScheme::training(0),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                lr: 2e-5,
                ..TrainConfig::default()
            },
            task: TaskSection::default(),
            chunking: ChunkingConfig::short(),
            evaluation: EvaluationSection::default(),
            synth: SynthSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Relative paths resolve against the config file's directory; unset
/// artifact paths default to locations under `output_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    pub clean_corpus: Option<PathBuf>,
    /// Documents for `evaluate-mlm`; the clean corpus when unset.
    pub eval_corpus: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Pretraining continues from this checkpoint when set.
    pub resume_from: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            corpus: None,
            corpus_format: CorpusFormat::Jsonl,
            clean_corpus: None,
            eval_corpus: None,
            tokenizer: None,
            checkpoint: None,
            finetuned: None,
            train: None,
            dev: None,
            test: None,
            resume_from: None,
        }
    }
}

/// Concrete locations after defaults and base-directory resolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedPaths {
    pub output_dir: PathBuf,
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub clean_corpus: PathBuf,
    pub eval_corpus: Option<PathBuf>,
    pub tokenizer: PathBuf,
    pub checkpoint: PathBuf,
    pub finetuned: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub resume_from: Option<PathBuf>,
}

impl PathsConfig {
    pub fn resolve(&self, base: &Path) -> ResolvedPaths {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let out = abs(&self.output_dir);
        let or = |p: &Option<PathBuf>, default: &str| p.as_deref().map_or_else(|| out.join(default), abs);
        ResolvedPaths {
            corpus: or(&self.corpus, "data/corpus.jsonl"),
            corpus_format: self.corpus_format,
            clean_corpus: or(&self.clean_corpus, "data/clean.jsonl"),
            eval_corpus: self.eval_corpus.as_deref().map(abs),
            tokenizer: or(&self.tokenizer, "tokenizer.json"),
            checkpoint: or(&self.checkpoint, "pretrain/checkpoint"),
            finetuned: or(&self.finetuned, "finetune/checkpoint"),
            train: or(&self.train, "data/train.jsonl"),
            dev: or(&self.dev, "data/dev.jsonl"),
            test: or(&self.test, "data/test.jsonl"),
            resume_from: self.resume_from.as_deref().map(abs),
            output_dir: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: 1000 }
    }
}

/// Encoder shape; the vocabulary comes from the tokenizer and the head from
/// the subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub max_positions: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub precision: Precision,
    pub attention: AttentionConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            max_positions: 512,
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            d_ff: 128,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            precision: Precision::F32,
            attention: AttentionConfig::longformer(64, vec![0]),
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize, head: HeadConfig) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_positions: self.max_positions,
            d_model: self.d_model,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_ff: self.d_ff,
            attention: self.attention.clone(),
            dropout_rate: self.dropout_rate,
            layer_norm_eps: self.layer_norm_eps,
            init_std: self.init_std,
            head,
            precision: self.precision,
            label_names: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: Task,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: Task::SeqCls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub mask_rate: f64,
    /// Documents are cut to this many tokens (CLS included); the model
    /// length when unset.
    pub truncate_to: Option<usize>,
    pub seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            mask_rate: 0.10,
            truncate_to: None,
            seed: 0,
        }
    }
}

/// What `synth-data` writes: an unlabeled corpus plus train/dev/test sets
/// for `task.kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub corpus: SynthSpec,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
    /// Words per QA context or classification text.
    pub text_words: usize,
    pub multilabel: bool,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            corpus: SynthSpec::with_numbered_rules(200, 200, 50, 100, 10, 0),
            train_examples: 40,
            dev_examples: 20,
            test_examples: 20,
            text_words: 40,
            multilabel: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub ns: Vec<usize>,
    pub kinds: Vec<AttentionKind>,
    /// Full attention is only timed up to this length.
    pub full_cap: usize,
    pub repeats: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            ns: vec![256, 512, 1024, 2048, 4096],
            kinds: vec![AttentionKind::Full, AttentionKind::Longformer, AttentionKind::Bigbird],
            full_cap: 2048,
            repeats: 5,
            d_model: 64,
            num_heads: 4,
            seed: 0,
        }
    }
}

/// Sets `path` (dot separated) in a TOML table. The value is read as TOML
/// when it parses, otherwise as a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} has an empty segment")));
    }
    let (last, parents) = keys.split_last().expect("nonempty");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parses config text and applies overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Path {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.paths.corpus = Some("notes.txt".into());
        c.chunking.truncate_doc_to = Some(300);
        let back = ExperimentConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::from_toml_with_overrides(
            "[finetune]\nlr = 1e-5\n",
            &[
                "finetune.lr=2e-5".into(),
                "model.attention.kind=bigbird".into(),
                "paths.output_dir=runs/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.finetune.lr, 2e-5);
        assert_eq!(c.model.attention.kind, AttentionKind::Bigbird);
        assert_eq!(c.paths.output_dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_toml_with_overrides("[pretrain]\nlearning_rate = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml_with_overrides("seed = \n", &[]).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
