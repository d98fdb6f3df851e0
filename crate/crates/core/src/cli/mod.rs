//! The `longseq` command line: one TOML experiment config, dotted overrides,
//! and a run manifest next to every subcommand's outputs.

pub mod bench;
pub mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::Serialize;
use serde_json::json;

pub use bench::{bench_attention, BenchRow};
pub use config::{ExperimentConfig, ResolvedPaths};

use crate::datasets::{read_jsonl, synth_cls, synth_ner, synth_nli, synth_qa, DatasetError, Task, TaskData};
use crate::longdoc::{write_predictions_jsonl, LongDocError};
use crate::model::{init_model, load_checkpoint, save_checkpoint, CheckpointError, HeadConfig, ModelError};
use crate::textprep::{clean_note, load_corpus, synth_corpus, CleanDocument, CorpusFormat, RawDocument, TextError};
use crate::tokenizer::{train_bpe, BpeModel, TokenizerError};
use crate::training::{evaluate_mlm, evaluate_task, finetune, pack_documents, pretrain_mlm, RunHooks, TrainError};

pub const VERSION: &str = match option_env!("LONGSEQ_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Path { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    LongDoc(#[from] LongDocError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Path { .. } => "path",
            CliError::Text(_) | CliError::Dataset(_) => "data",
            CliError::Tokenizer(_) => "tokenizer",
            CliError::Model(_) | CliError::Checkpoint(_) | CliError::Attention(_) => "model",
            CliError::Train(_) | CliError::LongDoc(_) => "training",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 3,
            "path" => 4,
            "data" => 5,
            "tokenizer" => 6,
            "model" => 7,
            _ => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Preprocess,
    TrainTokenizer,
    Pretrain,
    EvaluateMlm,
    Finetune,
    Predict,
    Evaluate,
    SynthData,
    BenchAttention,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Preprocess => "preprocess",
            Subcommand::TrainTokenizer => "train-tokenizer",
            Subcommand::Pretrain => "pretrain",
            Subcommand::EvaluateMlm => "evaluate-mlm",
            Subcommand::Finetune => "finetune",
            Subcommand::Predict => "predict",
            Subcommand::Evaluate => "evaluate",
            Subcommand::SynthData => "synth-data",
            Subcommand::BenchAttention => "bench-attention",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "longseq", version = VERSION, about = "Long-sequence clinical encoder experiments")]
pub struct Args {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Dotted overrides such as `finetune.lr=2e-5`.
    pub overrides: Vec<String>,
}

/// What a finished (or failed) subcommand reports.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub result: Result<Vec<PathBuf>, CliError>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.result.as_ref().map_or_else(CliError::exit_code, |_| 0)
    }
}

struct Ctx {
    config: ExperimentConfig,
    paths: ResolvedPaths,
    dir: PathBuf,
    outputs: Vec<PathBuf>,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Path {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(io_at(p))?;
    }
    Ok(())
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Path {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
        })
    }
}

impl Ctx {
    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(value).expect("serializable");
        fs::write(&path, text + "\n").map_err(io_at(&path))?;
        self.outputs.push(path);
        Ok(())
    }

    fn read_clean(&mut self) -> Result<Vec<CleanDocument>, CliError> {
        if !self.paths.clean_corpus.exists() {
            preprocess(self)?;
        }
        Ok(read_jsonl(&self.paths.clean_corpus)?)
    }

    fn tokenizer(&mut self) -> Result<BpeModel, CliError> {
        if !self.paths.tokenizer.exists() {
            train_tokenizer(self)?;
        }
        Ok(BpeModel::load(&self.paths.tokenizer)?)
    }

    fn task_data(&self, path: &Path) -> Result<TaskData, CliError> {
        require(path)?;
        Ok(TaskData::load(self.config.task.kind, path)?)
    }
}

fn preprocess(ctx: &mut Ctx) -> Result<(), CliError> {
    require(&ctx.paths.corpus)?;
    let mut docs = Vec::new();
    let (mut chars_in, mut chars_out) = (0usize, 0usize);
    for raw in load_corpus(&ctx.paths.corpus, ctx.paths.corpus_format)? {
        let raw = raw?;
        let clean = clean_note(&raw);
        chars_in += raw.text.chars().count();
        chars_out += clean.text.len();
        docs.push(clean);
    }
    ensure_parent(&ctx.paths.clean_corpus)?;
    crate::datasets::write_jsonl(&ctx.paths.clean_corpus, &docs)?;
    ctx.outputs.push(ctx.paths.clean_corpus.clone());
    ctx.write_json(
        "preprocess_metrics.json",
        &json!({"documents": docs.len(), "chars_in": chars_in, "chars_out": chars_out}),
    )
}

fn train_tokenizer(ctx: &mut Ctx) -> Result<(), CliError> {
    let docs = ctx.read_clean()?;
    let tok = train_bpe(docs.iter().map(|d| d.text.as_str()), ctx.config.tokenizer.vocab_size)?;
    ensure_parent(&ctx.paths.tokenizer)?;
    tok.save(&ctx.paths.tokenizer)?;
    ctx.outputs.push(ctx.paths.tokenizer.clone());
    ctx.write_json(
        "tokenizer_metrics.json",
        &json!({"vocab_size": tok.vocab_size(), "num_merges": tok.num_merges()}),
    )
}

fn pretrain(ctx: &mut Ctx) -> Result<(), CliError> {
    if let Some(p) = &ctx.paths.resume_from {
        require(p)?;
    }
    let tok = ctx.tokenizer()?;
    let docs = ctx.read_clean()?;
    let model_config = ctx.config.model.to_model_config(tok.vocab_size(), HeadConfig::Mlm);
    let start = match ctx.paths.resume_from.as_deref() {
        Some(p) => load_checkpoint(p)?,
        None => init_model(&model_config, ctx.config.seed)?,
    };
    let ids: Vec<Vec<_>> = docs.iter().map(|d| tok.encode(&d.text, false)).collect();
    let sequences = pack_documents(&ids, start.config.max_positions);
    let eval_sequences = match &ctx.paths.eval_corpus {
        Some(p) => {
            require(p)?;
            let held: Vec<CleanDocument> = read_jsonl(p)?;
            Some(held.iter().map(|d| tok.encode(&d.text, false)).collect::<Vec<_>>())
        }
        None => None,
    };
    let log_path = ctx.dir.join("log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_at(&log_path))?);
    let hooks = RunHooks {
        log: Some(&mut log),
        checkpoint_dir: Some(ctx.dir.join("checkpoints")),
        stop_at: None,
        eval_sequences: eval_sequences.as_deref(),
    };
    let ckpt = pretrain_mlm(start, &sequences, &ctx.config.pretrain, &ctx.config.masking, hooks)?;
    drop(log);
    ctx.outputs.push(log_path.clone());
    let losses: Vec<f64> = fs::read_to_string(&log_path)
        .map_err(io_at(&log_path))?
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v["split"] == "train")
        .filter_map(|v| v["loss"].as_f64())
        .collect();
    save_checkpoint(&ckpt, &ctx.paths.checkpoint)?;
    ctx.outputs.push(ctx.paths.checkpoint.clone());
    let tail = &losses[losses.len().saturating_sub(10)..];
    ctx.write_json(
        "metrics.json",
        &json!({
            "step": ckpt.step,
            "sequences": sequences.len(),
            "first_loss": losses.first(),
            "final_loss_mean10": (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
        }),
    )
}

fn evaluate_mlm_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    require(&ctx.paths.checkpoint)?;
    let tok = ctx.tokenizer()?;
    let ckpt = load_checkpoint(&ctx.paths.checkpoint)?;
    let docs: Vec<CleanDocument> = match &ctx.paths.eval_corpus {
        Some(p) => {
            require(p)?;
            read_jsonl(p)?
        }
        None => ctx.read_clean()?,
    };
    let ids: Vec<Vec<_>> = docs.iter().map(|d| tok.encode(&d.text, false)).collect();
    let eval = &ctx.config.evaluation;
    let truncate_to = eval.truncate_to.unwrap_or(ckpt.config.max_positions);
    let report = evaluate_mlm(&ckpt, &ids, truncate_to, eval.mask_rate, eval.seed)?;
    ctx.write_json("metrics.json", &report)
}

fn synth_data(ctx: &mut Ctx) -> Result<(), CliError> {
    let s = &ctx.config.synth;
    let docs = synth_corpus(&s.corpus)?;
    ensure_parent(&ctx.paths.corpus)?;
    match ctx.paths.corpus_format {
        CorpusFormat::Jsonl => {
            let raw: Vec<RawDocument> = docs
                .iter()
                .map(|d| RawDocument {
                    id: d.id.clone(),
                    text: d.text.clone(),
                })
                .collect();
            crate::datasets::write_jsonl(&ctx.paths.corpus, &raw)?;
        }
        CorpusFormat::PlainLines => {
            let text: String = docs.iter().map(|d| format!("{}\n", d.text)).collect();
            fs::write(&ctx.paths.corpus, text).map_err(io_at(&ctx.paths.corpus))?;
        }
    }
    let mut outputs = vec![ctx.paths.corpus.clone()];
    let sizes = [
        (&ctx.paths.train, s.train_examples),
        (&ctx.paths.dev, s.dev_examples),
        (&ctx.paths.test, s.test_examples),
    ];
    for (k, (path, n)) in sizes.into_iter().enumerate() {
        let seed = s.seed.wrapping_add(k as u64);
        let data = match ctx.config.task.kind {
            Task::SpanQa => TaskData::Qa(synth_qa(n, s.text_words, seed)),
            Task::TokenCls => TaskData::Ner(synth_ner(n, seed)),
            Task::SeqCls => TaskData::Cls(synth_cls(n, s.text_words, s.multilabel, seed)),
            Task::Nli => TaskData::Nli(synth_nli(n, seed)),
        };
        ensure_parent(path)?;
        data.save(path)?;
        outputs.push(path.clone());
    }
    ctx.outputs.extend(outputs);
    ctx.write_json(
        "metrics.json",
        &json!({
            "documents": docs.len(),
            "task": ctx.config.task.kind.name(),
            "train": s.train_examples,
            "dev": s.dev_examples,
            "test": s.test_examples,
        }),
    )
}

fn finetune_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    require(&ctx.paths.checkpoint)?;
    let train = ctx.task_data(&ctx.paths.train.clone())?;
    let dev = ctx.task_data(&ctx.paths.dev.clone())?;
    let tok = ctx.tokenizer()?;
    let base = load_checkpoint(&ctx.paths.checkpoint)?;
    let out = finetune(&base, &train, &dev, &tok, &ctx.config.finetune, &ctx.config.chunking)?;
    save_checkpoint(&out.checkpoint, &ctx.paths.finetuned)?;
    ctx.outputs.push(ctx.paths.finetuned.clone());
    ctx.write_json(
        "metrics.json",
        &json!({
            "task": ctx.config.task.kind.name(),
            "best_epoch": out.best_epoch,
            "selection_metric": out.metric_name,
            "dev_history": out.history,
        }),
    )
}

fn predict_or_evaluate(ctx: &mut Ctx, write_predictions: bool) -> Result<(), CliError> {
    require(&ctx.paths.finetuned)?;
    let data = ctx.task_data(&ctx.paths.test.clone())?;
    let tok = ctx.tokenizer()?;
    let ckpt = load_checkpoint(&ctx.paths.finetuned)?;
    let (report, records) = evaluate_task(&ckpt, &tok, &data, &ctx.config.chunking)?;
    if write_predictions {
        let path = ctx.dir.join("predictions.jsonl");
        let f = BufWriter::new(fs::File::create(&path).map_err(io_at(&path))?);
        write_predictions_jsonl(f, &records)?;
        ctx.outputs.push(path);
        ctx.write_json("metrics.json", &json!({"predictions": records.len()}))
    } else {
        ctx.write_json("metrics.json", &report)
    }
}

fn bench_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let rows = bench_attention(&ctx.config.bench, &ctx.config.model.attention)?;
    let path = ctx.dir.join("bench.csv");
    let f = BufWriter::new(fs::File::create(&path).map_err(io_at(&path))?);
    bench::write_csv(f, &rows).map_err(io_at(&path))?;
    ctx.outputs.push(path);
    let counts: Vec<_> = rows
        .iter()
        .map(|r| json!({"kind": r.kind, "n": r.n, "pair_count": r.pair_count, "density": r.density}))
        .collect();
    ctx.write_json("metrics.json", &counts)
}

fn dispatch(sub: Subcommand, ctx: &mut Ctx) -> Result<(), CliError> {
    match sub {
        Subcommand::Preprocess => preprocess(ctx),
        Subcommand::TrainTokenizer => train_tokenizer(ctx),
        Subcommand::Pretrain => pretrain(ctx),
        Subcommand::EvaluateMlm => evaluate_mlm_cmd(ctx),
        Subcommand::Finetune => finetune_cmd(ctx),
        Subcommand::Predict => predict_or_evaluate(ctx, true),
        Subcommand::Evaluate => predict_or_evaluate(ctx, false),
        Subcommand::SynthData => synth_data(ctx),
        Subcommand::BenchAttention => bench_cmd(ctx),
    }
}

fn seeds(c: &ExperimentConfig) -> serde_json::Value {
    json!({
        "model": c.seed,
        "masking": c.masking.seed,
        "pretrain": c.pretrain.seed,
        "finetune": c.finetune.seed,
        "evaluation": c.evaluation.seed,
        "synth": c.synth.seed,
        "synth_corpus": c.synth.corpus.seed,
        "attention": c.model.attention.seed,
        "bench": c.bench.seed,
    })
}

/// Runs one subcommand. Outputs go under `<output_dir>/<subcommand>/`, and a
/// `manifest.json` is written there whether or not the run succeeds.
pub fn run(sub: Subcommand, config_path: &Path, overrides: &[String]) -> RunOutcome {
    let started = Instant::now();
    let base = config_path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    let loaded = ExperimentConfig::load(config_path, overrides);
    let config = loaded.as_ref().cloned().unwrap_or_default();
    let paths = config.paths.resolve(&base);
    let dir = paths.output_dir.join(sub.name());
    let mut ctx = Ctx {
        config,
        paths,
        dir: dir.clone(),
        outputs: Vec::new(),
    };
    let result = loaded.map(|_| ()).and_then(|()| {
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        dispatch(sub, &mut ctx)
    });
    let error = result
        .as_ref()
        .err()
        .map(|e| json!({"category": e.category(), "message": e.to_string()}));
    let manifest = json!({
        "subcommand": sub.name(),
        "version": VERSION,
        "config_path": config_path,
        "overrides": overrides,
        "config": ctx.config,
        "resolved_paths": ctx.paths,
        "seeds": seeds(&ctx.config),
        "wall_time_secs": started.elapsed().as_secs_f64(),
        "status": if error.is_none() { "ok" } else { "error" },
        "error": error,
        "outputs": ctx.outputs,
    });
    let manifest_path = dir.join("manifest.json");
    let written = fs::create_dir_all(&dir)
        .and_then(|()| fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("json") + "\n"));
    if let Err(e) = written {
        eprintln!("could not write {}: {e}", manifest_path.display());
    }
    RunOutcome {
        dir,
        manifest: manifest_path,
        result: result.map(|()| ctx.outputs),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = run(args.subcommand, &args.config, &args.overrides);
    match &outcome.result {
        Ok(outputs) => {
            for p in outputs {
                println!("{}", p.display());
            }
        }
        Err(e) => eprintln!("{} failed [{}]: {e}", args.subcommand.name(), e.category()),
    }
    outcome.exit_code()
}
