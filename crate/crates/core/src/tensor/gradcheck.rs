//! Central finite-difference gradient checks.

use super::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / (|a| + |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Gradient norms below this many multiples of the central-difference
/// round-off floor (`eps * |loss| / h`) are treated as identically zero, for
/// example key biases, which softmax shift invariance cancels.
const VANISHING: f64 = 1e3;

/// Worst per-tensor relative error between backprop and central differences
/// for the trainable tensors of `store`.
///
/// `build` records a forward pass for the given parameter values and returns
/// the graph, its scalar loss and the store's bound leaves. At most
/// `per_tensor` evenly spaced entries of each tensor are probed.
pub fn check_params(
    store: &ParamStore,
    build: impl Fn(&ParamStore) -> Result<(Graph, Var, Bound)>,
    per_tensor: usize,
    h: f64,
) -> Result<f64> {
    let (g, loss, bound) = build(store)?;
    let floor = VANISHING * f64::EPSILON * g.value(loss)[0].abs().max(1.0) / h;
    let mut grads = g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.collect_grads(&bound, &mut grads)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    for (name, tensor) in names.iter().zip(with_grads.iter().map(|(_, t)| t)) {
        if !tensor.requires_grad() {
            continue;
        }
        let n = tensor.numel();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        let probes: Vec<usize> = (0..n).step_by(stride).collect();
        let analytic: Vec<f64> = probes
            .iter()
            .map(|&i| tensor.grad().map_or(0.0, |g| g[i]))
            .collect();
        let base = tensor.values().to_vec();
        let mut numeric = Vec::with_capacity(probes.len());
        for &i in &probes {
            let eval = |v: f64| -> Result<f64> {
                let mut probe = store.clone();
                let mut vals = base.clone();
                vals[i] = v;
                probe.set_values(name, tensor.shape(), vals)?;
                let (g, loss, _) = build(&probe)?;
                Ok(g.value(loss)[0])
            };
            numeric.push((eval(base[i] + h)? - eval(base[i] - h)?) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm(&analytic) < floor && norm(&numeric) < floor {
            continue;
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
