//! Reverse-mode gradients of a small graph against central differences.

use longseq::tensor::{Graph, Tensor};

fn loss_of(x: &Tensor, w: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let h = g.matmul(xv, wv).unwrap();
    let a = g.gelu(h);
    let t = g.tanh(a);
    let l = g.mean(t);
    g.value(l).item()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.1, 0.2, -0.7]])?;
    let w = Tensor::from_rows(&[vec![0.4, -0.3], vec![0.9, 0.1], vec![-0.5, 0.8]])?;

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let h = g.matmul(xv, wv)?;
    let a = g.gelu(h);
    let t = g.tanh(a);
    let l = g.mean(t);
    let grads = g.backward(l)?;
    let analytic = grads.get(wv);

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.numel() {
        let mut up = w.clone();
        up.data_mut()[i] += eps;
        let mut down = w.clone();
        down.data_mut()[i] -= eps;
        let numeric = (loss_of(&x, &up) - loss_of(&x, &down)) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        println!("w[{i}] analytic {a:+.8} numeric {numeric:+.8} rel {rel:.1e}");
        worst = worst.max(rel);
    }
    println!("worst relative error {worst:.1e}");
    Ok(())
}
