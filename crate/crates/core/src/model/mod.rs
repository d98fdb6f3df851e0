//! Transformer encoder with task heads and checkpoint persistence.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, DType, TensorRecord, FORMAT_VERSION};
pub use forward::{
    apply_head, encode_sequence, head_loss, mlm_logits_at, Batch, BoundModel, HeadLogits, Labels, Prediction,
    IGNORE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind};
use crate::tensor::{OptimizerState, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    Mlm,
    SpanQa,
    TokenCls { num_tags: usize },
    SeqCls { num_labels: usize, multilabel: bool },
}

impl HeadConfig {
    pub fn name(&self) -> &'static str {
        match self {
            HeadConfig::Mlm => "mlm",
            HeadConfig::SpanQa => "span_qa",
            HeadConfig::TokenCls { .. } => "token_cls",
            HeadConfig::SeqCls { .. } => "seq_cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    /// Standard deviation of the truncated-normal weight init.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub head: HeadConfig,
    #[serde(default)]
    pub precision: Precision,
    /// Names for tag or class ids, when the head has them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_names: Vec<String>,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("batch: {0}")]
    Batch(String),
    #[error("head mismatch: checkpoint has {have}, asked for {want}")]
    HeadMismatch { have: &'static str, want: &'static str },
    #[error("warm start: parameter {name} has shape {found:?}, expected {expected:?}")]
    WarmStartShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl ModelConfig {
    /// A tiny MLM encoder, mostly for tests and examples.
    pub fn tiny(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            max_positions,
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            d_ff: 32,
            attention: AttentionConfig::full(),
            dropout_rate: 0.0,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            head: HeadConfig::Mlm,
            precision: Precision::F32,
            label_names: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.max_positions == 0 || self.vocab_size == 0 || self.d_ff == 0 {
            return fail("max_positions, vocab_size, and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        match self.head {
            HeadConfig::TokenCls { num_tags: 0 } | HeadConfig::SeqCls { num_labels: 0, .. } => {
                return fail("head needs at least one output".into())
            }
            _ => {}
        }
        if self.attention.kind == AttentionKind::Bigbird && self.attention.block_size == 0 {
            return fail("bigbird block_size must be positive".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    fn uses_global_projections(&self) -> bool {
        self.attention.separate_global_projections && self.attention.kind == AttentionKind::Longformer
    }

    /// Every parameter implied by the config, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, ParamInit)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>, ParamInit)> = Vec::new();
        let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.weight"), vec![fan_in, fan_out], ParamInit::Normal));
            out.push((format!("{name}.bias"), vec![fan_out], ParamInit::Zeros));
        };
        let norm = |out: &mut Vec<(String, Vec<usize>, ParamInit)>, name: &str| {
            out.push((format!("{name}.gamma"), vec![d], ParamInit::Ones));
            out.push((format!("{name}.beta"), vec![d], ParamInit::Zeros));
        };
        out.push(("embeddings.token".into(), vec![self.vocab_size, d], ParamInit::Normal));
        out.push(("embeddings.position".into(), vec![self.max_positions, d], ParamInit::Normal));
        norm(&mut out, "embeddings.norm");
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            for proj in ["query", "key", "value"] {
                linear(&mut out, &format!("{p}.attn.{proj}"), d, d);
            }
            if self.uses_global_projections() {
                for proj in ["global_query", "global_key", "global_value"] {
                    linear(&mut out, &format!("{p}.attn.{proj}"), d, d);
                }
            }
            linear(&mut out, &format!("{p}.attn.output"), d, d);
            norm(&mut out, &format!("{p}.attn.norm"));
            linear(&mut out, &format!("{p}.ffn.input"), d, self.d_ff);
            linear(&mut out, &format!("{p}.ffn.output"), self.d_ff, d);
            norm(&mut out, &format!("{p}.ffn.norm"));
        }
        match self.head {
            HeadConfig::Mlm => {
                linear(&mut out, "head.mlm.dense", d, d);
                norm(&mut out, "head.mlm.norm");
                linear(&mut out, "head.mlm.decoder", d, self.vocab_size);
            }
            HeadConfig::SpanQa => linear(&mut out, "head.span", d, 2),
            HeadConfig::TokenCls { num_tags } => linear(&mut out, "head.tokens", d, num_tags),
            HeadConfig::SeqCls { num_labels, .. } => {
                linear(&mut out, "head.seq.dense", d, d);
                linear(&mut out, "head.seq.out", d, num_labels);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    Normal,
    Zeros,
    Ones,
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Encoder configuration plus parameters, optional optimizer state, and the
/// training step reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Params,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
}

/// Truncated normal (σ = `init_std`, cut at 2σ) weights, zero biases, unit
/// norm gains. Values are rounded to the configured storage precision.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std).expect("validated std");
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Ones => vec![1.0; n],
            ParamInit::Normal => (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * config.init_std {
                        break config.precision.round(x);
                    }
                })
                .collect(),
        };
        names.push(name);
        tensors.push(Tensor::new(&shape, data)?);
    }
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        params: Params::new(names, tensors),
        optimizer: None,
        step: 0,
    })
}

/// Seeded init, then every parameter present in `source` with a matching
/// shape is copied. Position embeddings with a different number of rows are
/// filled by repeating the source rows.
pub fn init_model_warm(config: &ModelConfig, seed: u64, source: &Checkpoint) -> Result<Checkpoint, ModelError> {
    let mut ckpt = init_model(config, seed)?;
    for (name, src) in source.params.iter() {
        let Some(dst) = ckpt.params.get_mut(name) else { continue };
        if dst.shape() == src.shape() {
            *dst = src.clone();
        } else if name == "embeddings.position" && dst.shape()[1] == src.shape()[1] {
            let d = dst.shape()[1];
            let src_rows = src.shape()[0];
            let rows = dst.shape()[0];
            let data = dst.data_mut();
            for r in 0..rows {
                let s = r % src_rows;
                data[r * d..(r + 1) * d].copy_from_slice(&src.data()[s * d..(s + 1) * d]);
            }
        } else {
            return Err(ModelError::WarmStartShape {
                name: name.to_string(),
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny(50, 32);
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 3).unwrap().params, init_model(&cfg, 4).unwrap().params);
    }

    #[test]
    fn init_conventions() {
        let cfg = ModelConfig::tiny(50, 32);
        let c = init_model(&cfg, 1).unwrap();
        assert!(c.params.get("layers.0.attn.query.bias").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(c.params.get("layers.1.ffn.norm.gamma").unwrap().data().iter().all(|&x| x == 1.0));
        let w = c.params.get("embeddings.token").unwrap();
        assert!(w.data().iter().all(|&x| x.abs() <= 0.04 && x == x as f32 as f64));
        let std = (w.data().iter().map(|x| x * x).sum::<f64>() / w.numel() as f64).sqrt();
        assert!((0.012..0.02).contains(&std), "std {std}");
    }

    #[test]
    fn divisibility() {
        let mut cfg = ModelConfig::tiny(50, 32);
        cfg.d_model = 6;
        cfg.num_heads = 4;
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn warm_start_tiles_positions() {
        let short = ModelConfig::tiny(40, 512);
        let src = init_model(&short, 1).unwrap();
        let long = ModelConfig {
            max_positions: 4096,
            ..short.clone()
        };
        let dst = init_model_warm(&long, 2, &src).unwrap();
        let s = src.params.get("embeddings.position").unwrap();
        let d = dst.params.get("embeddings.position").unwrap();
        assert_eq!(&d.data()[..512 * 16], s.data());
        assert_eq!(d.row(513), s.row(1));
        assert_eq!(dst.params.get("layers.1.ffn.input.weight"), src.params.get("layers.1.ffn.input.weight"));

        let other = ModelConfig {
            d_ff: 8,
            ..long
        };
        assert!(matches!(init_model_warm(&other, 2, &src), Err(ModelError::WarmStartShape { .. })));
    }
}
