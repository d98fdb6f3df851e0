//! Attention patterns (full, sliding window + global, block window + global +
//! random) and pattern-restricted multi-head attention on the tape.

mod ops;
mod pattern;

pub use ops::{attention_forward, multi_head_attention, MultiHeadInputs};
pub use pattern::{
    build_bigbird_pattern, build_full_pattern, build_longformer_pattern, pattern_stats, AttentionConfig,
    AttentionKind, AttentionPattern, PatternStats,
};

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("sequence length must be positive")]
    EmptySequence,
    #[error("global index {index} outside sequence of length {n}")]
    GlobalOutOfRange { index: usize, n: usize },
    #[error("query block {query_block} needs {requested} random blocks but only {available} remain")]
    TooManyRandomBlocks {
        requested: usize,
        available: usize,
        query_block: usize,
    },
    #[error("attention config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
