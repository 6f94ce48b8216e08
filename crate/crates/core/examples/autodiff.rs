//! Reverse-mode gradients of a small two-layer network, checked against
//! central finite differences.

use fnirsfm::error::Result;
use fnirsfm::tensor::gradcheck::{numeric_gradient, relative_error};
use fnirsfm::tensor::Graph;

fn loss(w1: &[f64], x: &[f64], w2: &[f64], labels: &[f64]) -> Result<(Graph, fnirsfm::tensor::Var, fnirsfm::tensor::Var)> {
    let mut g = Graph::new();
    let x = g.constant(vec![4, 3], x.to_vec())?;
    let w1v = g.variable(vec![3, 5], w1.to_vec())?;
    let w2v = g.constant(vec![5, 1], w2.to_vec())?;
    let h = g.matmul(x, w1v)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2v)?;
    let l = g.bce_with_logits(logits, labels)?;
    Ok((g, l, w1v))
}

fn main() -> Result<()> {
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let w1: Vec<f64> = (0..15).map(|i| (i as f64 * 1.3).cos() * 0.5).collect();
    let w2: Vec<f64> = (0..5).map(|i| 0.3 - 0.15 * i as f64).collect();
    let labels = [1.0, 0.0, 1.0, 0.0];

    let (g, l, w1v) = loss(&w1, &x, &w2, &labels)?;
    println!("loss {:.6}", g.value(l)[0]);
    let grads = g.backward(l)?;
    let analytic = grads.get(w1v).expect("w1 gradient").to_vec();
    let numeric = numeric_gradient(
        |w| loss(w, &x, &w2, &labels).map(|(g, l, _)| g.value(l)[0]).unwrap_or(f64::NAN),
        &w1,
        1e-5,
    );
    println!("dL/dW1[0..5] {:?}", &analytic[..5]);
    println!("relative error vs finite differences {:.2e}", relative_error(&analytic, &numeric));
    Ok(())
}
