//! Recording tape. Every op appends a node holding its value and, when any
//! input requires a gradient, a closure mapping the output gradient to input
//! gradients. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and backward is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    dot, gelu, gelu_grad, log_sum_exp, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel,
    shape_err, Tensor, TensorError,
};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a custom op. `backward` receives the output gradient and returns
    /// one optional gradient per input, in input order. It is only kept when
    /// some input requires a gradient.
    pub fn push_op<F>(&mut self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let input_grads = backward(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            // leaves and the loss keep their gradient; intermediates are released
            if node.inputs.is_empty() || idx == loss.0 {
                grads[idx] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let (ga, gb) = (self.needs(a), self.needs(b));
        let av = if gb { Some(self.value(a).clone()) } else { None };
        let bv = if ga { Some(self.value(b).clone()) } else { None };
        Ok(self.push_op(&[a, b], Tensor::new(&[m, n], out)?, move |g| {
            let da = bv.as_ref().map(|bv| {
                Tensor::new(&[m, k], matmul_nt_kernel(g.data(), bv.data(), m, n, k)).unwrap()
            });
            let db = av.as_ref().map(|av| {
                Tensor::new(&[k, n], matmul_tn_kernel(av.data(), g.data(), m, k, n)).unwrap()
            });
            vec![da, db]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(&[a, b], out, |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("sub", "shapes differ"));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(&[a, b], out, |g| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("mul", "shapes differ"));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        Ok(self.push_op(&[a, b], out, move |g| {
            vec![Some(g.zip_map(&bv, |g, y| g * y)), Some(g.zip_map(&av, |g, x| g * x))]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op(&[a], out, move |g| vec![Some(g.map(|x| x * s))])
    }

    /// `a[..×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (rows, n) = self.value(a).rows_of_last();
        if self.value(bias).shape() != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for rows of {n}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (x, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *x += bv;
            }
        }
        Ok(self.push_op(&[a, bias], out, move |g| {
            let mut gb = vec![0.0; n];
            for r in 0..rows {
                for (acc, gv) in gb.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                    *acc += gv;
                }
            }
            vec![Some(g.clone()), Some(Tensor::vector(gb))]
        }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(&[a], Tensor::scalar(s), move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = x.map(gelu);
        self.push_op(&[a], out, move |g| vec![Some(g.zip_map(&x, |g, x| g * gelu_grad(x)))])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let y = out.clone();
        self.push_op(&[a], out, move |g| vec![Some(g.zip_map(&y, |g, y| g * (1.0 - y * y)))])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let old = self.value(a).shape().to_vec();
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_op(&[a], out, move |g| vec![Some(g.clone().reshaped(&old).unwrap())]))
    }

    /// Layer normalization over the last extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, d) = self.value(x).rows_of_last();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "last extent {d} vs gamma {:?} beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push_op(&[x, gamma, beta], Tensor::new(&shape, out)?, move |g| {
            let gd = g.data();
            let mut dx = vec![0.0; rows * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let grow = &gd[r * d..(r + 1) * d];
                let hrow = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..d {
                    let dh = grow[j] * gv[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hrow[j];
                    dgamma[j] += grow[j] * hrow[j];
                    dbeta[j] += grow[j];
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let dh = grow[j] * gv[j];
                    dx[r * d + j] = inv_std[r] * (dh - inv_d * sum_dh - hrow[j] * inv_d * sum_dh_h);
                }
            }
            vec![
                Some(Tensor::new(&shape, dx).unwrap()),
                Some(Tensor::vector(dgamma)),
                Some(Tensor::vector(dbeta)),
            ]
        }))
    }

    /// Row-wise softmax over allowed entries; disallowed entries get exactly 0.
    pub fn masked_softmax(&mut self, logits: Var, allowed: &[bool]) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(logits).dims2()?;
        if allowed.len() != rows * cols {
            return Err(shape_err("masked_softmax", "mask size differs from logits"));
        }
        let lv = self.value(logits).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mask = &allowed[r * cols..(r + 1) * cols];
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY && !mask.iter().any(|&m| m) {
                return Err(TensorError::EmptyRow { row: r });
            }
            let mut z = 0.0;
            for c in 0..cols {
                if mask[c] {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        let probs = out.clone();
        Ok(self.push_op(&[logits], Tensor::new(&[rows, cols], out)?, move |g| {
            let gd = g.data();
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let p = &probs[r * cols..(r + 1) * cols];
                let gr = &gd[r * cols..(r + 1) * cols];
                let inner = dot(p, gr);
                for c in 0..cols {
                    dx[r * cols + c] = p[c] * (gr[c] - inner);
                }
            }
            vec![Some(Tensor::new(&[rows, cols], dx).unwrap())]
        }))
    }

    /// Mean negative log-softmax probability of the targets over rows whose
    /// target is not `ignore_id`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Var, TensorError> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy_mean", format!("{n} rows, {} targets", targets.len())));
        }
        let active: Vec<usize> = (0..n).filter(|&i| targets[i] != ignore_id).collect();
        if active.is_empty() {
            return Err(TensorError::AllIgnored);
        }
        if let Some(&t) = active.iter().map(|&i| &targets[i]).find(|&&t| t >= v) {
            return Err(TensorError::TargetOutOfRange { target: t, classes: v });
        }
        let lv = self.value(logits).data();
        let mut softmax = vec![0.0; active.len() * v];
        let mut total = 0.0;
        for (a, &i) in active.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            for c in 0..v {
                softmax[a * v + c] = (row[c] - lse).exp();
            }
        }
        let count = active.len() as f64;
        let targets = targets.to_vec();
        Ok(self.push_op(&[logits], Tensor::scalar(total / count), move |g| {
            let scale = g.item() / count;
            let mut dx = vec![0.0; n * v];
            for (a, &i) in active.iter().enumerate() {
                for c in 0..v {
                    dx[i * v + c] = softmax[a * v + c] * scale;
                }
                dx[i * v + targets[i]] -= scale;
            }
            vec![Some(Tensor::new(&[n, v], dx).unwrap())]
        }))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let lv = self.value(logits).clone();
        if lv.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits_mean", "targets must match logits"));
        }
        let n = targets.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let targets = targets.to_vec();
        Ok(self.push_op(&[logits], Tensor::scalar(total / n), move |g| {
            let s = g.item() / n;
            let mut dx = lv.clone();
            for (d, &y) in dx.data_mut().iter_mut().zip(&targets) {
                *d = (sigmoid(*d) - y) * s;
            }
            vec![Some(dx)]
        }))
    }

    /// Row lookup `table[ids[i]]`, gradient scattered back into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index { index: bad, extent: v });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        let n = ids.len();
        Ok(self.push_op(&[table], Tensor::new(&[n, d], out)?, move |g| {
            let mut dt = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                for (acc, gv) in dt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *acc += gv;
                }
            }
            vec![Some(Tensor::new(&[v, d], dt).unwrap())]
        }))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index { index: bad, extent: r });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rows = rows.to_vec();
        let k = rows.len();
        Ok(self.push_op(&[x], Tensor::new(&[k, c], out)?, move |g| {
            let mut dx = vec![0.0; r * c];
            for (o, &i) in rows.iter().enumerate() {
                for (acc, gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g.data()[o * c..(o + 1) * c]) {
                    *acc += gv;
                }
            }
            vec![Some(Tensor::new(&[r, c], dx).unwrap())]
        }))
    }

    /// Column `j` of a 2-D tensor as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        if j >= c {
            return Err(TensorError::Index { index: j, extent: c });
        }
        let out: Vec<f64> = (0..r).map(|i| self.value(x).data()[i * c + j]).collect();
        Ok(self.push_op(&[x], Tensor::vector(out), move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + j] = g.data()[i];
            }
            vec![Some(Tensor::new(&[r, c], dx).unwrap())]
        }))
    }

    /// Inverted dropout. `rate == 0` records an identity.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push_op(&[x], out, move |g| {
            let mut dx = g.clone();
            for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
                *d *= m;
            }
            vec![Some(dx)]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.max_abs_diff(b);
        let den = a.data().iter().chain(b.data()).map(|x| x.abs()).fold(1e-8, f64::max);
        num / den
    }

    /// Checks d(loss)/d(input k) for a graph built by `build`.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        for k in 0..inputs.len() {
            let f = |x: &Tensor| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { x.clone() } else { t.clone() }))
                    .collect();
                let l = build(&mut g, &vars);
                g.value(l).item()
            };
            let num = numeric_grad(&inputs[k], &f);
            let err = rel_err(&grads.get(vars[k]), &num);
            assert!(err < 1e-4, "input {k}: rel err {err}");
        }
    }

    /// Weighted sum so every output coordinate matters.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(&mut rng, &shape));
        let p = g.mul(v, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[17.0, 39.0]);
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn matmul_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, c) = (
            rand_tensor(&mut rng, &[4, 4]),
            rand_tensor(&mut rng, &[4, 4]),
            rand_tensor(&mut rng, &[4, 4]),
        );
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(a), g.constant(b), g.constant(c));
        let bc = g.add(b, c).unwrap();
        let lhs = g.matmul(a, bc).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let ac = g.matmul(a, c).unwrap();
        let rhs = g.add(ab, ac).unwrap();
        assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-12);
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let p = g.masked_softmax(x, &[true, true]).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::from_rows(&[vec![2f64.ln(), 0.0, 5.0]]).unwrap());
        let p = g.masked_softmax(x, &[true, true, false]).unwrap();
        let d = g.value(p).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d[2], 0.0);

        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(matches!(
            g.masked_softmax(x, &[false, false]),
            Err(TensorError::EmptyRow { row: 0 })
        ));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = rand_tensor(&mut rng, &[5, 7]).map(|v| v * 30.0);
            let mut mask: Vec<bool> = (0..35).map(|_| rng.gen_bool(0.5)).collect();
            for r in 0..5 {
                mask[r * 7 + r] = true;
            }
            let mut g = Graph::new();
            let xv = g.constant(x);
            let p = g.masked_softmax(xv, &mask).unwrap();
            for r in 0..5 {
                let row = &g.value(p).data()[r * 7..(r + 1) * 7];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for c in 0..7 {
                    if !mask[r * 7 + c] {
                        assert_eq!(row[c], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
        let bad = g.constant(Tensor::zeros(&[4]));
        assert!(g.layer_norm(x, bad, beta, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let mut g = Graph::new();
        let gamma = g.constant(rand_tensor(&mut rng, &[6]));
        let beta = g.constant(rand_tensor(&mut rng, &[6]));
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| v + 3.7));
        let ya = g.layer_norm(a, gamma, beta, 1e-5).unwrap();
        let yb = g.layer_norm(b, gamma, beta, 1e-5).unwrap();
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap());
        let l = g.cross_entropy_mean(x, &[2], usize::MAX).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let x = g.constant(Tensor::from_rows(&[vec![0.0, 1e4, 0.0]]).unwrap());
        let l = g.cross_entropy_mean(x, &[1], usize::MAX).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let rows = vec![vec![0.3, -1.0, 2.0], vec![5.0, 5.0, -5.0]];
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let base = g.cross_entropy_mean(x, &[0, 9], 9).unwrap();
        let mut dup = rows.clone();
        dup.push(rows[1].clone());
        let x2 = g.constant(Tensor::from_rows(&dup).unwrap());
        let l2 = g.cross_entropy_mean(x2, &[0, 9, 9], 9).unwrap();
        assert_eq!(g.value(base).item(), g.value(l2).item());

        assert!(matches!(g.cross_entropy_mean(x, &[9, 9], 9), Err(TensorError::AllIgnored)));
        assert!(matches!(
            g.cross_entropy_mean(x, &[3, 9], 9),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let unused = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(xv, xv).unwrap();
        let f = g.sum(sq);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(xv).data(), x.map(|v| 2.0 * v).data());
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
        assert!(matches!(g.backward(sq), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let mask = [true, false, true, true, true, false, false, true, true];
        check(vec![a, b], |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            let p = g.masked_softmax(m, &mask).unwrap();
            g.cross_entropy_mean(p, &[0, 1, 2], usize::MAX).unwrap()
        });
    }

    #[test]
    fn primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let r = 2 + trial % 3;
            let c = 3 + trial % 2;
            let x = rand_tensor(&mut rng, &[r, c]);
            let y = rand_tensor(&mut rng, &[r, c]);
            let w = rand_tensor(&mut rng, &[c, 4]);
            let bias = rand_tensor(&mut rng, &[c]);
            let gamma = rand_tensor(&mut rng, &[c]);
            let mask: Vec<bool> = (0..r * c).map(|i| i % c == 0 || rng.gen_bool(0.6)).collect();
            let targets: Vec<usize> = (0..r).map(|i| if i == 1 { 99 } else { rng.gen_range(0..c) }).collect();
            let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..r)).collect();
            let bce_t: Vec<f64> = (0..r * c).map(|_| rng.gen_range(0..2) as f64).collect();
            let s = trial as u64;
            check(vec![x.clone(), w.clone()], |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                project(g, m, s)
            });
            check(vec![x.clone(), y.clone()], |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let b = g.sub(a, v[1]).unwrap();
                let m = g.mul(b, v[1]).unwrap();
                let sc = g.scale(m, 0.7);
                project(g, sc, s)
            });
            check(vec![x.clone(), bias.clone()], |g, v| {
                let a = g.add_bias(v[0], v[1]).unwrap();
                project(g, a, s)
            });
            check(vec![x.clone()], |g, v| {
                let a = g.gelu(v[0]);
                let t = g.tanh(a);
                let m = g.mean(t);
                let p = project(g, a, s);
                g.add(m, p).unwrap()
            });
            check(vec![x.clone(), gamma.clone(), bias.clone()], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                project(g, y, s)
            });
            check(vec![x.clone()], |g, v| {
                let p = g.masked_softmax(v[0], &mask).unwrap();
                project(g, p, s)
            });
            check(vec![x.clone()], |g, v| g.cross_entropy_mean(v[0], &targets, 99).unwrap());
            check(vec![x.clone()], |g, v| g.bce_with_logits_mean(v[0], &bce_t).unwrap());
            check(vec![x.clone()], |g, v| {
                let e = g.embedding(v[0], &ids).unwrap();
                project(g, e, s)
            });
            check(vec![x.clone()], |g, v| {
                let e = g.gather_rows(v[0], &ids).unwrap();
                let col = g.column(e, 1).unwrap();
                let r = g.reshape(col, &[1, 5]).unwrap();
                project(g, r, s)
            });
            check(vec![x.clone()], |g, v| {
                let d = g.dropout(v[0], 0.3, 17);
                project(g, d, s)
            });
        }
    }
}
