use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::config::BenchSection;
use crate::attention::{multi_head_attention, pattern_stats, AttentionConfig, AttentionError, AttentionKind, MultiHeadInputs};
use crate::tensor::{Graph, Tensor};

/// One CSV row. `median_forward_ms` is `None` when timing was skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub n: usize,
    pub pair_count: u64,
    pub density: f64,
    pub median_forward_ms: Option<f64>,
}

pub const CSV_HEADER: &str = "kind,n,pair_count,density,median_forward_ms";

fn kind_name(kind: AttentionKind) -> &'static str {
    match kind {
        AttentionKind::Full => "full",
        AttentionKind::Longformer => "longformer",
        AttentionKind::Bigbird => "bigbird",
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

/// Exact pair counts for every (kind, n), and the median wall time of
/// `repeats` multi-head forward passes where the length is within limits.
/// Non-kind fields of `base` (radius, blocks, seed) configure the sparse
/// patterns.
pub fn bench_attention(bench: &BenchSection, base: &AttentionConfig) -> Result<Vec<BenchRow>, AttentionError> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    for &kind in &bench.kinds {
        for &n in &bench.ns {
            let config = AttentionConfig { kind, ..base.clone() };
            let pattern = Arc::new(config.build(n, &[])?);
            let stats = pattern_stats(&pattern);
            let timed = kind != AttentionKind::Full || n <= bench.full_cap;
            let median_forward_ms = if timed && bench.repeats > 0 {
                let q = random_matrix(&mut rng, n, bench.d_model);
                let k = random_matrix(&mut rng, n, bench.d_model);
                let v = random_matrix(&mut rng, n, bench.d_model);
                let inputs = MultiHeadInputs {
                    batch: 1,
                    seq_len: n,
                    num_heads: bench.num_heads,
                    patterns: vec![pattern.clone()],
                    key_valid: None,
                    query_rows: None,
                };
                let mut times = Vec::with_capacity(bench.repeats);
                for _ in 0..bench.repeats {
                    let mut g = Graph::new();
                    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
                    let started = Instant::now();
                    multi_head_attention(&mut g, qv, kv, vv, &inputs)?;
                    times.push(started.elapsed().as_secs_f64() * 1e3);
                }
                times.sort_by(f64::total_cmp);
                Some(times[times.len() / 2])
            } else {
                None
            };
            rows.push(BenchRow {
                kind,
                n,
                pair_count: stats.pair_count,
                density: stats.density,
                median_forward_ms,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        let ms = r.median_forward_ms.map_or_else(|| "skipped".to_string(), |m| format!("{m:.3}"));
        writeln!(w, "{},{},{},{},{}", kind_name(r.kind), r.n, r.pair_count, r.density, ms)?;
    }
    Ok(())
}
