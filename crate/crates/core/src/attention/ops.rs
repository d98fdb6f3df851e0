use std::sync::Arc;

use super::{AttentionError, AttentionPattern};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Layout of a fused multi-head attention call. `q`, `k`, `v` are
/// `[batch·seq_len × num_heads·d_head]` with heads laid out as column blocks.
#[derive(Debug, Clone)]
pub struct MultiHeadInputs {
    pub batch: usize,
    pub seq_len: usize,
    pub num_heads: usize,
    /// One pattern per batch item, or a single shared pattern.
    pub patterns: Vec<Arc<AttentionPattern>>,
    /// `false` marks padding keys; a row may always attend to itself.
    pub key_valid: Option<Vec<bool>>,
    /// Rows to compute; other rows produce zeros and no gradient.
    pub query_rows: Option<Vec<bool>>,
}

impl MultiHeadInputs {
    fn pattern(&self, b: usize) -> &AttentionPattern {
        if self.patterns.len() == 1 {
            &self.patterns[0]
        } else {
            &self.patterns[b]
        }
    }
}

/// Keys per query row for one batch item, shared by all heads.
struct RowKeys {
    row_ptr: Vec<usize>,
    keys: Vec<u32>,
}

/// Single-head attention restricted to `pattern`: softmax(QKᵀ/√d) V where only
/// allowed pairs are scored. `q`, `k`, `v` are `[n × d]`.
pub fn attention_forward(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    pattern: &AttentionPattern,
) -> Result<Var, AttentionError> {
    let (n, _) = graph.value(q).dims2()?;
    let inputs = MultiHeadInputs {
        batch: 1,
        seq_len: n,
        num_heads: 1,
        patterns: vec![Arc::new(pattern.clone())],
        key_valid: None,
        query_rows: None,
    };
    multi_head_attention(graph, q, k, v, &inputs)
}

/// Fused pattern-masked multi-head attention. Scores and probabilities are
/// materialized only for allowed pairs.
pub fn multi_head_attention(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    inp: &MultiHeadInputs,
) -> Result<Var, AttentionError> {
    let (rows, width) = graph.value(q).dims2()?;
    let (bsz, len, heads) = (inp.batch, inp.seq_len, inp.num_heads);
    if rows != bsz * len || graph.value(k).shape() != [rows, width] || graph.value(v).shape() != [rows, width] {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!(
                "q {:?} k {:?} v {:?} for batch {bsz} × len {len}",
                graph.value(q).shape(),
                graph.value(k).shape(),
                graph.value(v).shape()
            ),
        }
        .into());
    }
    if heads == 0 || width % heads != 0 {
        return Err(AttentionError::Config(format!("width {width} not divisible into {heads} heads")));
    }
    if inp.patterns.len() != 1 && inp.patterns.len() != bsz {
        return Err(AttentionError::Config("need one pattern or one per batch item".into()));
    }
    for b in 0..bsz {
        if inp.pattern(b).len() != len {
            return Err(AttentionError::Config(format!(
                "pattern length {} for sequence length {len}",
                inp.pattern(b).len()
            )));
        }
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qv = graph.value(q).data();
    let kv = graph.value(k).data();
    let vv = graph.value(v).data();

    let mut row_keys = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let pattern = inp.pattern(b);
        let mut row_ptr = Vec::with_capacity(len + 1);
        let mut keys = Vec::new();
        row_ptr.push(0);
        for i in 0..len {
            let active = inp.query_rows.as_ref().is_none_or(|m| m[b * len + i]);
            if active {
                let before = keys.len();
                keys.extend(
                    pattern
                        .row_keys(i)
                        .filter(|&j| j == i || inp.key_valid.as_ref().is_none_or(|m| m[b * len + j]))
                        .map(|j| j as u32),
                );
                if keys.len() == before {
                    return Err(TensorError::EmptyRow { row: b * len + i }.into());
                }
            }
            row_ptr.push(keys.len());
        }
        row_keys.push(RowKeys { row_ptr, keys });
    }

    let mut out = vec![0.0; rows * width];
    // probs[b * heads + h] aligned with row_keys[b].keys
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(bsz * heads);
    let mut scores = Vec::new();
    for (b, rk) in row_keys.iter().enumerate() {
        for h in 0..heads {
            let col = h * dh;
            let mut p = vec![0.0; rk.keys.len()];
            for i in 0..len {
                let (s, e) = (rk.row_ptr[i], rk.row_ptr[i + 1]);
                if s == e {
                    continue;
                }
                let qi = &qv[(b * len + i) * width + col..][..dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for &j in &rk.keys[s..e] {
                    let kj = &kv[(b * len + j as usize) * width + col..][..dh];
                    let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(sc);
                    scores.push(sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let oi = &mut out[(b * len + i) * width + col..][..dh];
                for (t, &j) in rk.keys[s..e].iter().enumerate() {
                    let pj = scores[t] / z;
                    p[s + t] = pj;
                    let vj = &vv[(b * len + j as usize) * width + col..][..dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
            probs.push(p);
        }
    }

    let (need_q, need_k, need_v) = (graph.requires_grad(q), graph.requires_grad(k), graph.requires_grad(v));
    let any = need_q || need_k || need_v;
    let saved = if any {
        Some((graph.value(q).clone(), graph.value(k).clone(), graph.value(v).clone()))
    } else {
        None
    };
    let output = Tensor::new(&[rows, width], out)?;
    Ok(graph.push_op(&[q, k, v], output, move |g| {
        let (qt, kt, vt) = saved.as_ref().expect("saved inputs");
        let (qv, kv, vv) = (qt.data(), kt.data(), vt.data());
        let gd = g.data();
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = Vec::new();
        for (b, rk) in row_keys.iter().enumerate() {
            for h in 0..heads {
                let col = h * dh;
                let p = &probs[b * heads + h];
                for i in 0..len {
                    let (s, e) = (rk.row_ptr[i], rk.row_ptr[i + 1]);
                    if s == e {
                        continue;
                    }
                    let base_i = (b * len + i) * width + col;
                    let doi = &gd[base_i..base_i + dh];
                    dp.clear();
                    let mut inner = 0.0;
                    for (t, &j) in rk.keys[s..e].iter().enumerate() {
                        let vj = &vv[(b * len + j as usize) * width + col..][..dh];
                        let d = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        inner += p[s + t] * d;
                        dp.push(d);
                    }
                    let qi: Vec<f64> = qv[base_i..base_i + dh].to_vec();
                    for (t, &j) in rk.keys[s..e].iter().enumerate() {
                        let pj = p[s + t];
                        let ds = pj * (dp[t] - inner) * scale;
                        let base_j = (b * len + j as usize) * width + col;
                        for c in 0..dh {
                            dq[base_i + c] += ds * kv[base_j + c];
                            dk[base_j + c] += ds * qi[c];
                            dv[base_j + c] += pj * doi[c];
                        }
                    }
                }
            }
        }
        let shape = [rows, width];
        vec![
            need_q.then(|| Tensor::new(&shape, dq).unwrap()),
            need_k.then(|| Tensor::new(&shape, dk).unwrap()),
            need_v.then(|| Tensor::new(&shape, dv).unwrap()),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_full_pattern, build_longformer_pattern};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Dense reference: explicit n×n scores, masked softmax, weighted sum.
    fn dense_reference(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Tensor {
        let (n, d) = q.dims2().unwrap();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.at2(i, c) * k.at2(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = (0..n).filter(|&j| mask[i * n + j]).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).filter(|&j| mask[i * n + j]).map(|j| (s[j] - max).exp()).sum();
            for j in (0..n).filter(|&j| mask[i * n + j]) {
                let p = (s[j] - max).exp() / z;
                for c in 0..d {
                    out[i * d + c] += p * v.at2(j, c);
                }
            }
        }
        Tensor::new(&[n, d], out).unwrap()
    }

    #[test]
    fn uniform_weights() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 1]));
        let v = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let o = attention_forward(&mut g, q, q, v, &build_full_pattern(2).unwrap()).unwrap();
        assert_eq!(g.value(o).data(), &[1.5, 1.5]);
    }

    #[test]
    fn diagonal_pattern_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let q = g.constant(rand_t(&mut rng, 6, 3));
        let k = g.constant(rand_t(&mut rng, 6, 3));
        let vt = rand_t(&mut rng, 6, 3);
        let v = g.constant(vt.clone());
        let o = attention_forward(&mut g, q, k, v, &build_longformer_pattern(6, 0, &[]).unwrap()).unwrap();
        assert_eq!(g.value(o), &vt);
    }

    #[test]
    fn wide_window_equals_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (qt, kt, vt) = (rand_t(&mut rng, 12, 4), rand_t(&mut rng, 12, 4), rand_t(&mut rng, 12, 4));
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
        let a = attention_forward(&mut g, q, k, v, &build_longformer_pattern(12, 11, &[]).unwrap()).unwrap();
        let b = attention_forward(&mut g, q, k, v, &build_full_pattern(12).unwrap()).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-10);
        let dense = dense_reference(&qt, &kt, &vt, &vec![true; 144]);
        assert!(g.value(b).max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn sparse_matches_dense_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = build_longformer_pattern(15, 2, &[0, 9]).unwrap();
        let (qt, kt, vt) = (rand_t(&mut rng, 15, 4), rand_t(&mut rng, 15, 4), rand_t(&mut rng, 15, 4));
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
        let o = attention_forward(&mut g, q, k, v, &p).unwrap();
        assert!(g.value(o).max_abs_diff(&dense_reference(&qt, &kt, &vt, &p.to_dense())) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 7;
        let d = 4;
        let pattern = Arc::new(build_longformer_pattern(n, 1, &[2]).unwrap());
        let inputs = MultiHeadInputs {
            batch: 1,
            seq_len: n,
            num_heads: 2,
            patterns: vec![pattern],
            key_valid: Some(vec![true, true, true, true, true, false, false]),
            query_rows: None,
        };
        let ts = [rand_t(&mut rng, n, d), rand_t(&mut rng, n, d), rand_t(&mut rng, n, d)];
        let w = rand_t(&mut rng, n, d);
        let loss = |ts: &[Tensor], params: bool| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts
                .iter()
                .map(|t| if params { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect();
            let o = multi_head_attention(&mut g, vars[0], vars[1], vars[2], &inputs).unwrap();
            let wv = g.constant(w.clone());
            let m = g.mul(o, wv).unwrap();
            let l = g.sum(m);
            (g, vars, l)
        };
        let (g, vars, l) = loss(&ts, true);
        let grads = g.backward(l).unwrap();
        for which in 0..3 {
            let analytic = grads.get(vars[which]);
            for idx in 0..n * d {
                let h = 1e-5;
                let mut plus = ts.clone();
                plus[which].data_mut()[idx] += h;
                let mut minus = ts.clone();
                minus[which].data_mut()[idx] -= h;
                let (gp, _, lp) = loss(&plus, false);
                let (gm, _, lm) = loss(&minus, false);
                let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!((a - num).abs() <= 1e-6 * (1.0 + num.abs()), "input {which} idx {idx}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn locality() {
        // token 6 (non-global, radius 1) must ignore keys outside {5,6,7,0}
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = build_longformer_pattern(12, 1, &[0]).unwrap();
        let (qt, kt, vt) = (rand_t(&mut rng, 12, 3), rand_t(&mut rng, 12, 3), rand_t(&mut rng, 12, 3));
        let mut k2 = kt.clone();
        let mut v2 = vt.clone();
        for j in [2, 3, 9, 11] {
            for c in 0..3 {
                k2.data_mut()[j * 3 + c] += 5.0;
                v2.data_mut()[j * 3 + c] -= 3.0;
            }
        }
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt), g.constant(kt), g.constant(vt));
        let (ka, va) = (g.constant(k2), g.constant(v2));
        let a = attention_forward(&mut g, q, k, v, &p).unwrap();
        let b = attention_forward(&mut g, q, ka, va, &p).unwrap();
        assert_eq!(g.value(a).row(6), g.value(b).row(6));
        assert_ne!(g.value(a).row(0), g.value(b).row(0));
    }

    #[test]
    fn query_row_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Arc::new(build_full_pattern(5).unwrap());
        let (qt, kt, vt) = (rand_t(&mut rng, 5, 2), rand_t(&mut rng, 5, 2), rand_t(&mut rng, 5, 2));
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt), g.constant(kt), g.constant(vt));
        let all = attention_forward(&mut g, q, k, v, &p).unwrap();
        let inputs = MultiHeadInputs {
            batch: 1,
            seq_len: 5,
            num_heads: 1,
            patterns: vec![p],
            key_valid: None,
            query_rows: Some(vec![true, false, false, true, false]),
        };
        let some = multi_head_attention(&mut g, q, k, v, &inputs).unwrap();
        assert_eq!(g.value(some).row(3), g.value(all).row(3));
        assert_eq!(g.value(some).row(1), &[0.0, 0.0]);
    }
}
