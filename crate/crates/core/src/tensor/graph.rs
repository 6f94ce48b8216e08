use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;

use super::gemm::{gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ChannelGate {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        channels: usize,
        heads: usize,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    GroupMean {
        x: Var,
        weights: Vec<f64>,
        group: usize,
    },
    ScaleGroups {
        x: Var,
        s: Var,
        group: usize,
    },
    RepeatRows(Var),
    Reshape(Var),
    SumAll(Var),
    MaskedMse {
        pred: Var,
        diff: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Computation graph recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. The graph is consumed by
/// [`Graph::backward`]; build a fresh one per step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to every leaf that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaves.remove(&v)
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exponentiates and normalizes `row` in place over unmasked entries; masked
/// entries become exactly zero.
fn softmax_row(row: &mut [f64], mask: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if mask(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if mask(i) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// Softmax backward: `ds = p * (dp - <p, dp>)`, written into `dp`.
fn softmax_row_backward(p: &[f64], dp: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (d, &pi) in dp.iter_mut().zip(p) {
        *d = pi * (*d - dot);
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf copied from a tensor; participates in backward iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Constant leaf. Values must be finite.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// Leaf that requires grad regardless of origin (used by gradient checks).
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?.trainable();
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {m}x{k} . {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rows(self.value(a), 0, k),
            View::rows(self.value(b), 0, n),
            0.0,
            &mut out,
            0,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, a: Var, r: Var, what: &str) -> Result<usize> {
        let n = last_dim(self.shape(a));
        if self.value(r).len() != n {
            return Err(Error::shape(format!(
                "{what}: row vector of length {} against last dimension {n}",
                self.value(r).len()
            )));
        }
        Ok(n)
    }

    /// `a + r` with `r` broadcast over the leading dimensions of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let n = self.row_broadcast(a, r, "add_row")?;
        let rv = self.value(r);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddRow(a, r)))
    }

    /// `a * r` with `r` broadcast over the leading dimensions of `a`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let n = self.row_broadcast(a, r, "mul_row")?;
        let rv = self.value(r);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulRow(a, r)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, c))
    }

    /// Elementwise product with a constant factor array.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return Err(Error::shape("mul_const: factor count differs from tensor size"));
        }
        let out = self.value(a).iter().zip(&factors).map(|(x, f)| x * f).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulConst(a, factors)))
    }

    /// Inverted dropout: each element kept with probability `1 - p` and
    /// rescaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let factors = dropout_factors(self.value(a).len(), p, rng);
        self.mul_const(a, factors)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Sigmoid(a))
    }

    /// Standardizes each row of the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.row_broadcast(x, gain, "layer_norm gain")?;
        self.row_broadcast(x, bias, "layer_norm bias")?;
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last dimension restricted to positions where `mask`
    /// is true. Masked positions are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_softmax: mask size differs from logits"));
        }
        let n = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            if !softmax_row(row, |i| mask[r * n + i]) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::MaskedSoftmax(x)))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch*tq x d]`, `k` and `v` are `[batch*tk x d]`; rows of each
    /// sequence are contiguous. `key_mask` is `[batch x tk]` with `true` for
    /// keys that may be attended. Heads split `d` into equal slices.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rq, d) = dims2(self.shape(q))?;
        let (rk, dk) = dims2(self.shape(k))?;
        if self.shape(v) != self.shape(k) || d != dk {
            return Err(Error::shape("attention: q/k/v widths or k/v shapes differ"));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(Error::shape("attention: rows not divisible by batch"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let (tq, tk, dh) = (rq / batch, rk / batch, d / heads);
        if key_mask.len() != batch * tk {
            return Err(Error::shape("attention: key mask must be batch x tk"));
        }
        for b in 0..batch {
            if !key_mask[b * tk..(b + 1) * tk].iter().any(|&m| m) {
                return Err(Error::DegenerateRow { row: b });
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        for b in 0..batch {
            let mask = &key_mask[b * tk..(b + 1) * tk];
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let s = &mut probs[p_off..p_off + tq * tk];
                gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    View::rows(qv, b * tq * d + h * dh, d),
                    View::rows(kv, b * tk * d + h * dh, d).t(),
                    0.0,
                    s,
                    0,
                    tk,
                );
                for row in s.chunks_mut(tk) {
                    softmax_row(row, |i| mask[i]);
                }
                gemm(
                    tq,
                    tk,
                    dh,
                    1.0,
                    View::rows(&probs, p_off, tk),
                    View::rows(vv, b * tk * d + h * dh, d),
                    0.0,
                    &mut out,
                    b * tq * d + h * dh,
                    d,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![rq, d],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tq,
                tk,
                heads,
                probs,
            },
        ))
    }

    /// Channel gating attention.
    ///
    /// A single query `q` `[1 x d]` attends, per head, over the `channels`
    /// keys of each batch element (`k` is `[batch*channels x d]`). Each head
    /// carries a scalar value per channel (`v` is `[batch*channels x heads]`).
    /// The output `[batch x channels]` is the head average of
    /// `weight * value`. With `dropout > 0` each channel of each batch
    /// element is dropped in all heads at once (inverted scaling).
    #[allow(clippy::too_many_arguments)]
    pub fn channel_gate(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (one, d) = dims2(self.shape(q))?;
        let (rk, dk) = dims2(self.shape(k))?;
        let (rv, hv) = dims2(self.shape(v))?;
        if one != 1 || d != dk || rk != rv || hv != heads || batch == 0 || rk % batch != 0 {
            return Err(Error::shape("channel_gate: inconsistent q/k/v shapes"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("channel_gate: width not divisible by heads"));
        }
        let channels = rk / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * channels];
        for b in 0..batch {
            for h in 0..heads {
                let row = &mut probs[(b * heads + h) * channels..(b * heads + h + 1) * channels];
                for (c, s) in row.iter_mut().enumerate() {
                    let kr = &kv[(b * channels + c) * d + h * dh..(b * channels + c) * d + (h + 1) * dh];
                    *s = scale * kr.iter().zip(&qv[h * dh..(h + 1) * dh]).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_row(row, |_| true);
            }
        }
        let keep = match rng {
            Some(rng) if dropout > 0.0 => {
                let shared = dropout_factors(batch * channels, dropout, rng);
                Some(
                    (0..probs.len())
                        .map(|i| shared[(i / (heads * channels)) * channels + i % channels])
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let mut out = vec![0.0; batch * channels];
        for b in 0..batch {
            for c in 0..channels {
                let mut acc = 0.0;
                for h in 0..heads {
                    let i = (b * heads + h) * channels + c;
                    let w = probs[i] * keep.as_ref().map_or(1.0, |kf| kf[i]);
                    acc += w * vv[(b * channels + c) * heads + h];
                }
                out[b * channels + c] = acc / heads as f64;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![batch, channels],
            out,
            rg,
            Op::ChannelGate {
                q,
                k,
                v,
                batch,
                channels,
                heads,
                probs,
                keep,
            },
        ))
    }

    /// Weighted sum of rows within consecutive groups: `x` is
    /// `[groups*group x n]`, `weights` is `[groups x group]`, output is
    /// `[groups x n]`.
    pub fn group_mean(&mut self, x: Var, weights: Vec<f64>, group: usize) -> Result<Var> {
        let (r, n) = dims2(self.shape(x))?;
        if group == 0 || r % group != 0 || weights.len() != r {
            return Err(Error::shape("group_mean: weights must cover every row"));
        }
        let groups = r / group;
        let xv = self.value(x);
        let mut out = vec![0.0; groups * n];
        for (row, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let g = row / group;
            for j in 0..n {
                out[g * n + j] += w * xv[row * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![groups, n], out, rg, Op::GroupMean { x, weights, group }))
    }

    /// `out[r, c] = x[r, c] * s[r / group, c]`.
    pub fn scale_groups(&mut self, x: Var, s: Var, group: usize) -> Result<Var> {
        let (r, n) = dims2(self.shape(x))?;
        let (g, n2) = dims2(self.shape(s))?;
        if n != n2 || group == 0 || g * group != r {
            return Err(Error::shape("scale_groups: shapes do not line up"));
        }
        let (xv, sv) = (self.value(x), self.value(s));
        let out = (0..r * n)
            .map(|i| xv[i] * sv[(i / n / group) * n + i % n])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(vec![r, n], out, rg, Op::ScaleGroups { x, s, group }))
    }

    /// Tiles the rows of `x` `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, n) = dims2(self.shape(x))?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * n * times);
        for _ in 0..times {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r * times, n], out, rg, Op::RepeatRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::SumAll(x))
    }

    /// Mean squared error over cells where `indicator` is true.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], indicator: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if target.len() != pv.len() || indicator.len() != pv.len() {
            return Err(Error::shape("masked_mse: prediction, target and indicator differ in size"));
        }
        let count = indicator.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let diff: Vec<f64> = (0..pv.len())
            .map(|i| if indicator[i] { pv[i] - target[i] } else { 0.0 })
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count as f64;
        let rg = self.rg(pred);
        Ok(self.push(vec![1], vec![loss], rg, Op::MaskedMse { pred, diff, count }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.is_empty() {
            return Err(Error::shape("bce_with_logits: logits and labels differ in length"));
        }
        let loss = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Attention probabilities recorded by an `attention` node
    /// (`[batch x heads x tq x tk]`) or a `channel_gate` node
    /// (`[batch x heads x channels]`, before dropout).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } | Op::ChannelGate { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if let Op::Leaf = op {
                out.leaves.insert(Var(i), g);
                continue;
            }
            self.backprop(i, &op, &g, &mut grads);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |da| {
                    gemm(m, n, k, 1.0, View::rows(g, 0, n), View::rows(bv, 0, n).t(), 1.0, da, 0, k)
                });
                self.acc(grads, *b, |db| {
                    gemm(k, m, n, 1.0, View::rows(av, 0, k).t(), View::rows(g, 0, n), 1.0, db, 0, n)
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                self.acc(grads, *b, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *r, |d| {
                    let n = d.len();
                    for (j, x) in g.iter().enumerate() {
                        d[j % n] += x;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let n = rv.len();
                self.acc(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * rv[j % n];
                    }
                });
                self.acc(grads, *r, |d| {
                    for j in 0..g.len() {
                        d[j % n] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::MulConst(a, f) => self.acc(grads, *a, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * f[j];
                }
            }),
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_grad(av[j]);
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let dm = gv.len();
                self.acc(grads, *gain, |d| {
                    for (j, gj) in g.iter().enumerate() {
                        d[j % dm] += gj * xhat[j];
                    }
                });
                self.acc(grads, *bias, |d| {
                    for (j, gj) in g.iter().enumerate() {
                        d[j % dm] += gj;
                    }
                });
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![0.0; dm];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let off = r * dm;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dm {
                            dxhat[j] = g[off + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[off + j];
                        }
                        m1 /= dm as f64;
                        m2 /= dm as f64;
                        for j in 0..dm {
                            d[off + j] += inv * (dxhat[j] - m1 - xhat[off + j] * m2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let n = last_dim(&self.nodes[i].shape);
                self.acc(grads, *x, |d| {
                    let mut buf = vec![0.0; n];
                    for (r, p) in out.chunks(n).enumerate() {
                        buf.copy_from_slice(&g[r * n..(r + 1) * n]);
                        softmax_row_backward(p, &mut buf);
                        add_into(&mut d[r * n..(r + 1) * n], &buf);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tq,
                tk,
                heads,
                probs,
            } => self.attention_backward(g, grads, [*q, *k, *v], *batch, *tq, *tk, *heads, probs),
            Op::ChannelGate {
                q,
                k,
                v,
                batch,
                channels,
                heads,
                probs,
                keep,
            } => self.channel_gate_backward(
                g,
                grads,
                [*q, *k, *v],
                *batch,
                *channels,
                *heads,
                probs,
                keep.as_deref(),
            ),
            Op::GroupMean { x, weights, group } => {
                let n = last_dim(self.shape(*x));
                let group_rows = *group;
                self.acc(grads, *x, |d| {
                    for (row, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        let gi = row / group_rows;
                        for j in 0..n {
                            d[row * n + j] += w * g[gi * n + j];
                        }
                    }
                });
            }
            Op::ScaleGroups { x, s, group } => {
                let n = last_dim(self.shape(*x));
                let (xv, sv) = (self.value(*x), self.value(*s));
                self.acc(grads, *x, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * sv[(j / n / group) * n + j % n];
                    }
                });
                self.acc(grads, *s, |d| {
                    for j in 0..g.len() {
                        d[(j / n / group) * n + j % n] += g[j] * xv[j];
                    }
                });
            }
            Op::RepeatRows(x) => self.acc(grads, *x, |d| {
                let len = d.len();
                for (j, gj) in g.iter().enumerate() {
                    d[j % len] += gj;
                }
            }),
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::SumAll(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MaskedMse { pred, diff, count } => self.acc(grads, *pred, |d| {
                let c = 2.0 * g[0] / *count as f64;
                for j in 0..d.len() {
                    d[j] += c * diff[j];
                }
            }),
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits);
                self.acc(grads, *logits, |d| {
                    let c = g[0] / z.len() as f64;
                    for j in 0..d.len() {
                        d[j] += c * (sigmoid(z[j]) - labels[j]);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        [q, k, v]: [Var; 3],
        batch: usize,
        tq: usize,
        tk: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let need_qk = self.rg(q) || self.rg(k);
        let mut dq = self.rg(q).then(|| vec![0.0; qv.len()]);
        let mut dk = self.rg(k).then(|| vec![0.0; kv.len()]);
        let mut dv = self.rg(v).then(|| vec![0.0; vv.len()]);
        let mut ds = vec![0.0; tq * tk];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let q_off = b * tq * d + h * dh;
                let k_off = b * tk * d + h * dh;
                if let Some(dv) = dv.as_mut() {
                    gemm(tk, tq, dh, 1.0, View::rows(probs, p_off, tk).t(), View::rows(g, q_off, d), 1.0, dv, k_off, d);
                }
                if !need_qk {
                    continue;
                }
                gemm(tq, dh, tk, 1.0, View::rows(g, q_off, d), View::rows(vv, k_off, d).t(), 0.0, &mut ds, 0, tk);
                for (r, row) in ds.chunks_mut(tk).enumerate() {
                    softmax_row_backward(&probs[p_off + r * tk..p_off + (r + 1) * tk], row);
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(tq, tk, dh, scale, View::rows(&ds, 0, tk), View::rows(kv, k_off, d), 1.0, dq, q_off, d);
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(tk, tq, dh, scale, View::rows(&ds, 0, tk).t(), View::rows(qv, q_off, d), 1.0, dk, k_off, d);
                }
            }
        }
        for (var, gv) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = gv {
                self.acc(grads, var, |d| add_into(d, &gv));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn channel_gate_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        [q, k, v]: [Var; 3],
        batch: usize,
        channels: usize,
        heads: usize,
        probs: &[f64],
        keep: Option<&[f64]>,
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let hf = heads as f64;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut da = vec![0.0; channels];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * channels;
                for c in 0..channels {
                    let kf = keep.map_or(1.0, |kf| kf[base + c]);
                    let gc = g[b * channels + c] / hf;
                    dv[(b * channels + c) * heads + h] += gc * probs[base + c] * kf;
                    da[c] = gc * vv[(b * channels + c) * heads + h] * kf;
                }
                softmax_row_backward(&probs[base..base + channels], &mut da);
                for (c, ds) in da.iter().enumerate() {
                    let k_off = (b * channels + c) * d + h * dh;
                    for j in 0..dh {
                        dq[h * dh + j] += scale * ds * kv[k_off + j];
                        dk[k_off + j] += scale * ds * qv[h * dh + j];
                    }
                }
            }
        }
        self.acc(grads, q, |d| add_into(d, &dq));
        self.acc(grads, k, |d| add_into(d, &dk));
        self.acc(grads, v, |d| add_into(d, &dv));
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

pub(crate) fn dropout_factors(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}
