use std::collections::HashMap;
use std::sync::Arc;

use super::{Checkpoint, HeadConfig, ModelConfig, ModelError, Params};
use crate::attention::{multi_head_attention, AttentionKind, MultiHeadInputs};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{TokenId, PAD};

/// Label value meaning "no loss at this position".
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    None,
    /// Original ids at masked positions, `IGNORE` elsewhere; `B·L` entries.
    Mlm(Vec<usize>),
    /// One start and one end index per sequence.
    Span { start: Vec<usize>, end: Vec<usize> },
    /// Tag ids per position, `IGNORE` for pads and continuation pieces.
    Tags(Vec<usize>),
    /// One class per sequence.
    Class(Vec<usize>),
    /// `B × num_labels` 0/1 targets, row-major.
    MultiLabel(Vec<f64>),
}

/// Right-padded batch, all buffers row-major `B × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<TokenId>,
    /// `true` at padding positions.
    pub pad_mask: Vec<bool>,
    pub global_mask: Vec<bool>,
    pub labels: Labels,
}

impl Batch {
    /// Pads `sequences` with `PAD` to the longest one. `globals[b]` lists the
    /// positions of sequence `b` that get global attention.
    pub fn from_sequences(sequences: &[Vec<TokenId>], globals: &[Vec<usize>], labels: Labels) -> Self {
        let batch_size = sequences.len();
        let seq_len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut token_ids = vec![PAD; batch_size * seq_len];
        let mut pad_mask = vec![true; batch_size * seq_len];
        let mut global_mask = vec![false; batch_size * seq_len];
        for (b, seq) in sequences.iter().enumerate() {
            token_ids[b * seq_len..b * seq_len + seq.len()].copy_from_slice(seq);
            pad_mask[b * seq_len..b * seq_len + seq.len()].iter_mut().for_each(|p| *p = false);
            if let Some(g) = globals.get(b) {
                for &i in g.iter().filter(|&&i| i < seq.len()) {
                    global_mask[b * seq_len + i] = true;
                }
            }
        }
        Self {
            batch_size,
            seq_len,
            token_ids,
            pad_mask,
            global_mask,
            labels,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let n = self.batch_size * self.seq_len;
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if self.token_ids.len() != n || self.pad_mask.len() != n || self.global_mask.len() != n {
            return Err(ModelError::Batch(format!("buffers must hold {n} entries")));
        }
        if self.seq_len > config.max_positions {
            return Err(ModelError::TooLong {
                len: self.seq_len,
                max: config.max_positions,
            });
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
        if self.pad_mask.iter().zip(&self.global_mask).any(|(&p, &g)| p && g) {
            return Err(ModelError::Batch("padding position marked global".into()));
        }
        let b = self.batch_size;
        let ok = match (&self.labels, config.head) {
            (Labels::None, _) => true,
            (Labels::Mlm(l), HeadConfig::Mlm) | (Labels::Tags(l), HeadConfig::TokenCls { .. }) => l.len() == n,
            (Labels::Span { start, end }, HeadConfig::SpanQa) => start.len() == b && end.len() == b,
            (Labels::Class(c), HeadConfig::SeqCls { multilabel: false, .. }) => c.len() == b,
            (Labels::MultiLabel(t), HeadConfig::SeqCls { num_labels, multilabel: true }) => t.len() == b * num_labels,
            _ => false,
        };
        if !ok {
            return Err(ModelError::Batch(format!("labels do not fit the {} head", config.head.name())));
        }
        Ok(())
    }
}

/// Parameters attached to a graph, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundModel<'a> {
    pub config: &'a ModelConfig,
    vars: Vec<Var>,
    index: HashMap<&'a str, usize>,
}

impl<'a> BoundModel<'a> {
    /// Records every parameter as a graph leaf. `trainable` leaves collect
    /// gradients; otherwise they are constants.
    pub fn attach(graph: &mut Graph, config: &'a ModelConfig, params: &'a Params, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            vars.push(if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            });
            index.insert(name, i);
        }
        Self { config, vars, index }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        // parameter sets are validated against the config on load and init
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var, ModelError> {
        let y = g.matmul(x, self.get(&format!("{name}.weight")))?;
        Ok(g.add_bias(y, self.get(&format!("{name}.bias")))?)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var, ModelError> {
        Ok(g.layer_norm(
            x,
            self.get(&format!("{name}.gamma")),
            self.get(&format!("{name}.beta")),
            self.config.layer_norm_eps,
        )?)
    }
}

fn mix_seed(seed: u64, site: u64) -> u64 {
    let mut z = seed ^ site.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hidden states `[B·L × d_model]`. Dropout is active only when
/// `dropout_seed` is given.
pub fn encode_sequence(
    graph: &mut Graph,
    model: &BoundModel<'_>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<Var, ModelError> {
    let cfg = model.config;
    batch.validate(cfg)?;
    let (bsz, len) = (batch.batch_size, batch.seq_len);
    let rate = if dropout_seed.is_some() { cfg.dropout_rate } else { 0.0 };
    let mut site = 0u64;
    let mut dropout = |g: &mut Graph, x: Var| {
        site += 1;
        g.dropout(x, rate, mix_seed(dropout_seed.unwrap_or(0), site))
    };

    let ids: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
    let tok = graph.embedding(model.get("embeddings.token"), &ids)?;
    let pos = graph.embedding(model.get("embeddings.position"), &positions)?;
    let x = graph.add(tok, pos)?;
    let x = model.norm(graph, x, "embeddings.norm")?;
    let mut x = dropout(graph, x);

    let mut patterns = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let globals: Vec<usize> = (0..len).filter(|&i| batch.global_mask[b * len + i]).collect();
        patterns.push(Arc::new(cfg.attention.build(len, &globals)?));
    }
    let key_valid: Vec<bool> = batch.pad_mask.iter().map(|&p| !p).collect();
    let split_global = cfg.attention.separate_global_projections
        && cfg.attention.kind == AttentionKind::Longformer
        && batch.global_mask.iter().any(|&g| g);
    let local_inputs = MultiHeadInputs {
        batch: bsz,
        seq_len: len,
        num_heads: cfg.num_heads,
        patterns: patterns.clone(),
        key_valid: Some(key_valid.clone()),
        query_rows: split_global.then(|| batch.global_mask.iter().map(|&g| !g).collect()),
    };
    let global_inputs = MultiHeadInputs {
        query_rows: Some(batch.global_mask.clone()),
        ..local_inputs.clone()
    };

    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        let q = model.linear(graph, x, &format!("{p}.attn.query"))?;
        let k = model.linear(graph, x, &format!("{p}.attn.key"))?;
        let v = model.linear(graph, x, &format!("{p}.attn.value"))?;
        let mut ctx = multi_head_attention(graph, q, k, v, &local_inputs)?;
        if split_global {
            let qg = model.linear(graph, x, &format!("{p}.attn.global_query"))?;
            let kg = model.linear(graph, x, &format!("{p}.attn.global_key"))?;
            let vg = model.linear(graph, x, &format!("{p}.attn.global_value"))?;
            let gctx = multi_head_attention(graph, qg, kg, vg, &global_inputs)?;
            ctx = graph.add(ctx, gctx)?;
        }
        let attn = model.linear(graph, ctx, &format!("{p}.attn.output"))?;
        let attn = dropout(graph, attn);
        let res = graph.add(x, attn)?;
        x = model.norm(graph, res, &format!("{p}.attn.norm"))?;

        let h = model.linear(graph, x, &format!("{p}.ffn.input"))?;
        let h = graph.gelu(h);
        let h = model.linear(graph, h, &format!("{p}.ffn.output"))?;
        let h = dropout(graph, h);
        let res = graph.add(x, h)?;
        x = model.norm(graph, res, &format!("{p}.ffn.norm"))?;
    }
    Ok(x)
}

/// Head outputs as graph nodes. Token-level logits are kept 2-D with
/// `B·L` rows.
#[derive(Debug, Clone, Copy)]
pub enum HeadLogits {
    /// `[B·L × V]`
    Mlm(Var),
    /// `[B × L]` each
    Span { start: Var, end: Var },
    /// `[B·L × num_tags]`
    Tokens(Var),
    /// `[B × num_labels]`
    Sequence(Var),
}

/// MLM logits for selected rows of `hidden` only.
pub fn mlm_logits_at(
    graph: &mut Graph,
    model: &BoundModel<'_>,
    hidden: Var,
    rows: &[usize],
) -> Result<Var, ModelError> {
    if model.config.head != HeadConfig::Mlm {
        return Err(ModelError::HeadMismatch {
            have: model.config.head.name(),
            want: "mlm",
        });
    }
    let h = graph.gather_rows(hidden, rows)?;
    mlm_transform(graph, model, h)
}

fn mlm_transform(graph: &mut Graph, model: &BoundModel<'_>, h: Var) -> Result<Var, ModelError> {
    let h = model.linear(graph, h, "head.mlm.dense")?;
    let h = graph.gelu(h);
    let h = model.norm(graph, h, "head.mlm.norm")?;
    model.linear(graph, h, "head.mlm.decoder")
}

pub fn apply_head(
    graph: &mut Graph,
    model: &BoundModel<'_>,
    hidden: Var,
    batch_size: usize,
    seq_len: usize,
    head: HeadConfig,
) -> Result<HeadLogits, ModelError> {
    if head != model.config.head {
        return Err(ModelError::HeadMismatch {
            have: model.config.head.name(),
            want: head.name(),
        });
    }
    Ok(match head {
        HeadConfig::Mlm => HeadLogits::Mlm(mlm_transform(graph, model, hidden)?),
        HeadConfig::SpanQa => {
            let both = model.linear(graph, hidden, "head.span")?;
            let s = graph.column(both, 0)?;
            let e = graph.column(both, 1)?;
            HeadLogits::Span {
                start: graph.reshape(s, &[batch_size, seq_len])?,
                end: graph.reshape(e, &[batch_size, seq_len])?,
            }
        }
        HeadConfig::TokenCls { .. } => HeadLogits::Tokens(model.linear(graph, hidden, "head.tokens")?),
        HeadConfig::SeqCls { .. } => {
            let cls: Vec<usize> = (0..batch_size).map(|b| b * seq_len).collect();
            let h = graph.gather_rows(hidden, &cls)?;
            let h = model.linear(graph, h, "head.seq.dense")?;
            let h = graph.tanh(h);
            HeadLogits::Sequence(model.linear(graph, h, "head.seq.out")?)
        }
    })
}

/// Scalar training loss for the batch labels under the configured head.
pub fn head_loss(
    graph: &mut Graph,
    model: &BoundModel<'_>,
    hidden: Var,
    batch: &Batch,
) -> Result<Var, ModelError> {
    let (b, l) = (batch.batch_size, batch.seq_len);
    let head = model.config.head;
    let loss = match (&batch.labels, head) {
        (Labels::Mlm(labels), HeadConfig::Mlm) => {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE).collect();
            let targets: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let logits = mlm_logits_at(graph, model, hidden, &rows)?;
            graph.cross_entropy_mean(logits, &targets, IGNORE)?
        }
        (Labels::Span { start, end }, HeadConfig::SpanQa) => {
            let HeadLogits::Span { start: s, end: e } = apply_head(graph, model, hidden, b, l, head)? else {
                unreachable!()
            };
            let ls = graph.cross_entropy_mean(s, start, IGNORE)?;
            let le = graph.cross_entropy_mean(e, end, IGNORE)?;
            let sum = graph.add(ls, le)?;
            graph.scale(sum, 0.5)
        }
        (Labels::Tags(tags), HeadConfig::TokenCls { .. }) => {
            let HeadLogits::Tokens(t) = apply_head(graph, model, hidden, b, l, head)? else {
                unreachable!()
            };
            graph.cross_entropy_mean(t, tags, IGNORE)?
        }
        (Labels::Class(c), HeadConfig::SeqCls { multilabel: false, .. }) => {
            let HeadLogits::Sequence(s) = apply_head(graph, model, hidden, b, l, head)? else {
                unreachable!()
            };
            graph.cross_entropy_mean(s, c, IGNORE)?
        }
        (Labels::MultiLabel(t), HeadConfig::SeqCls { multilabel: true, .. }) => {
            let HeadLogits::Sequence(s) = apply_head(graph, model, hidden, b, l, head)? else {
                unreachable!()
            };
            graph.bce_with_logits_mean(s, t)?
        }
        _ => {
            return Err(ModelError::Batch(format!(
                "labels do not fit the {} head",
                head.name()
            )))
        }
    };
    Ok(loss)
}

/// Forward-only head outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// `[B × L × V]`
    Mlm(Tensor),
    /// `[B × L]` each
    Span { start: Tensor, end: Tensor },
    /// `[B × L × num_tags]`
    Tokens(Tensor),
    /// `[B × num_labels]`
    Sequence(Tensor),
}

impl Checkpoint {
    pub fn hidden_states(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let model = BoundModel::attach(&mut g, &self.config, &self.params, false);
        let h = encode_sequence(&mut g, &model, batch, None)?;
        let d = self.config.d_model;
        Ok(g.value(h).clone().reshaped(&[batch.batch_size, batch.seq_len, d])?)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let model = BoundModel::attach(&mut g, &self.config, &self.params, false);
        let h = encode_sequence(&mut g, &model, batch, None)?;
        let (b, l) = (batch.batch_size, batch.seq_len);
        let out = apply_head(&mut g, &model, h, b, l, self.config.head)?;
        let take = |v: Var| g.value(v).clone();
        Ok(match out {
            HeadLogits::Mlm(v) => Prediction::Mlm(take(v).reshaped(&[b, l, self.config.vocab_size])?),
            HeadLogits::Span { start, end } => Prediction::Span {
                start: take(start),
                end: take(end),
            },
            HeadLogits::Tokens(v) => {
                let t = take(v);
                let tags = t.shape()[1];
                Prediction::Tokens(t.reshaped(&[b, l, tags])?)
            }
            HeadLogits::Sequence(v) => Prediction::Sequence(take(v)),
        })
    }

    /// Loss and one gradient per parameter, in parameter order.
    pub fn loss_and_gradients(&self, batch: &Batch, dropout_seed: Option<u64>) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut g = Graph::new();
        let model = BoundModel::attach(&mut g, &self.config, &self.params, true);
        let h = encode_sequence(&mut g, &model, batch, dropout_seed)?;
        let loss = head_loss(&mut g, &model, h, batch)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let out = model.vars().iter().map(|&v| grads.take(v)).collect();
        Ok((value, out))
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let model = BoundModel::attach(&mut g, &self.config, &self.params, false);
        let h = encode_sequence(&mut g, &model, batch, None)?;
        let loss = head_loss(&mut g, &model, h, batch)?;
        Ok(g.value(loss).item())
    }
}
