use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttentionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Full,
    Longformer,
    Bigbird,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Tokens attended on each side (longformer).
    pub window_radius: usize,
    /// Fixed global positions (longformer); per-example globals are added on top.
    pub global_set: Vec<usize>,
    /// Leading blocks promoted to global (bigbird).
    pub global_block_count: usize,
    pub block_size: usize,
    pub random_blocks_per_query: usize,
    pub seed: u64,
    /// Separate query/key/value projections for global rows.
    pub separate_global_projections: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Longformer,
            window_radius: 64,
            global_set: vec![0],
            global_block_count: 1,
            block_size: 64,
            random_blocks_per_query: 1,
            seed: 0,
            separate_global_projections: false,
        }
    }
}

impl AttentionConfig {
    pub fn full() -> Self {
        Self {
            kind: AttentionKind::Full,
            ..Default::default()
        }
    }

    pub fn longformer(window_radius: usize, global_set: Vec<usize>) -> Self {
        Self {
            kind: AttentionKind::Longformer,
            window_radius,
            global_set,
            ..Default::default()
        }
    }

    pub fn bigbird(block_size: usize, global_block_count: usize, random_blocks_per_query: usize, seed: u64) -> Self {
        Self {
            kind: AttentionKind::Bigbird,
            block_size,
            global_block_count,
            random_blocks_per_query,
            seed,
            global_set: Vec::new(),
            ..Default::default()
        }
    }

    /// Pattern for a sequence of length `n`. `extra_globals` are unioned with
    /// `global_set` for longformer and ignored by the other kinds.
    pub fn build(&self, n: usize, extra_globals: &[usize]) -> Result<AttentionPattern, AttentionError> {
        match self.kind {
            AttentionKind::Full => build_full_pattern(n),
            AttentionKind::Longformer => {
                let globals: Vec<usize> = self
                    .global_set
                    .iter()
                    .chain(extra_globals)
                    .copied()
                    .filter(|&g| g < n)
                    .collect();
                build_longformer_pattern(n, self.window_radius, &globals)
            }
            AttentionKind::Bigbird => build_bigbird_pattern(
                n,
                self.block_size,
                self.global_block_count,
                self.random_blocks_per_query,
                self.seed,
            ),
        }
    }
}

/// Allowed (query, key) pairs stored as sorted, disjoint, half-open key
/// intervals per query row. Memory is proportional to the number of intervals,
/// never to n².
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    n: usize,
    rows: Vec<Vec<(u32, u32)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub pair_count: u64,
    pub density: f64,
}

fn merge_intervals(mut iv: Vec<(u32, u32)>) -> Vec<(u32, u32)> {
    iv.retain(|(s, e)| s < e);
    iv.sort_unstable();
    let mut out: Vec<(u32, u32)> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

impl AttentionPattern {
    /// Builds a pattern from raw per-row intervals, merging overlaps.
    pub fn from_row_intervals(n: usize, rows: Vec<Vec<(u32, u32)>>) -> Self {
        debug_assert_eq!(rows.len(), n);
        Self {
            n,
            rows: rows.into_iter().map(merge_intervals).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row_intervals(&self, i: usize) -> &[(u32, u32)] {
        &self.rows[i]
    }

    pub fn row_keys(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().flat_map(|&(s, e)| s as usize..e as usize)
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.rows[i].iter().map(|(s, e)| (e - s) as usize).sum()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let j = j as u32;
        self.rows[i].iter().any(|&(s, e)| s <= j && j < e)
    }

    pub fn stats(&self) -> PatternStats {
        let pair_count: u64 = (0..self.n).map(|i| self.row_len(i) as u64).sum();
        PatternStats {
            pair_count,
            density: pair_count as f64 / (self.n as f64 * self.n as f64),
        }
    }

    /// Dense boolean mask; only sensible for small n.
    pub fn to_dense(&self) -> Vec<bool> {
        let mut m = vec![false; self.n * self.n];
        for i in 0..self.n {
            for j in self.row_keys(i) {
                m[i * self.n + j] = true;
            }
        }
        m
    }

    /// One JSON object per row: `{"row": i, "intervals": [[start, end], ...]}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let line = serde_json::json!({ "row": i, "intervals": row });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

pub fn pattern_stats(pattern: &AttentionPattern) -> PatternStats {
    pattern.stats()
}

pub fn build_full_pattern(n: usize) -> Result<AttentionPattern, AttentionError> {
    if n == 0 {
        return Err(AttentionError::EmptySequence);
    }
    Ok(AttentionPattern {
        n,
        rows: vec![vec![(0, n as u32)]; n],
    })
}

/// Sliding window of `window_radius` on each side plus symmetric global rows
/// and columns.
pub fn build_longformer_pattern(
    n: usize,
    window_radius: usize,
    global_set: &[usize],
) -> Result<AttentionPattern, AttentionError> {
    if n == 0 {
        return Err(AttentionError::EmptySequence);
    }
    if let Some(&g) = global_set.iter().find(|&&g| g >= n) {
        return Err(AttentionError::GlobalOutOfRange { index: g, n });
    }
    let globals: BTreeSet<usize> = global_set.iter().copied().collect();
    let rows = (0..n)
        .map(|i| {
            if globals.contains(&i) {
                return vec![(0, n as u32)];
            }
            let lo = i.saturating_sub(window_radius);
            let hi = (i + window_radius + 1).min(n);
            let mut iv = vec![(lo as u32, hi as u32)];
            iv.extend(
                globals
                    .iter()
                    .filter(|&&g| g < lo || g >= hi)
                    .map(|&g| (g as u32, g as u32 + 1)),
            );
            merge_intervals(iv)
        })
        .collect();
    Ok(AttentionPattern { n, rows })
}

/// Block-level pattern: each query block sees its neighbour blocks, the leading
/// `global_block_count` blocks (which in turn see everything), and
/// `random_blocks_per_query` further blocks drawn without replacement.
pub fn build_bigbird_pattern(
    n: usize,
    block_size: usize,
    global_block_count: usize,
    random_blocks_per_query: usize,
    seed: u64,
) -> Result<AttentionPattern, AttentionError> {
    if n == 0 {
        return Err(AttentionError::EmptySequence);
    }
    if block_size == 0 {
        return Err(AttentionError::Config("block_size must be positive".into()));
    }
    let blocks = n.div_ceil(block_size);
    let globals = global_block_count.min(blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_span = |b: usize| ((b * block_size) as u32, ((b + 1) * block_size).min(n) as u32);

    let mut block_rows: Vec<Vec<usize>> = Vec::with_capacity(blocks);
    for q in 0..blocks {
        if q < globals {
            block_rows.push((0..blocks).collect());
            continue;
        }
        let mut keys: BTreeSet<usize> = (q.saturating_sub(1)..=(q + 1).min(blocks - 1)).collect();
        keys.extend(0..globals);
        if keys.len() < blocks && random_blocks_per_query > 0 {
            let candidates: Vec<usize> = (0..blocks).filter(|b| !keys.contains(b)).collect();
            if random_blocks_per_query > candidates.len() {
                return Err(AttentionError::TooManyRandomBlocks {
                    requested: random_blocks_per_query,
                    available: candidates.len(),
                    query_block: q,
                });
            }
            for idx in sample(&mut rng, candidates.len(), random_blocks_per_query) {
                keys.insert(candidates[idx]);
            }
        }
        block_rows.push(keys.into_iter().collect());
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let q = i / block_size;
        rows.push(merge_intervals(block_rows[q].iter().map(|&b| block_span(b)).collect()));
    }
    Ok(AttentionPattern { n, rows })
}
