//! Building blocks shared by the encoder and the decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Initializer, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x W + b` with `b` broadcast over rows.
pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

pub(crate) fn maybe_dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => g.dropout(x, p, rng),
        _ => Ok(x),
    }
}

/// Sinusoidal table `[len x d]`: even columns `sin(t / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            pe[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Post-norm transformer block: attention sublayer then feed-forward
/// sublayer, each followed by residual addition and layer norm.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

pub(crate) struct BlockOutput {
    pub out: Var,
    /// The attention node; its probabilities are `[batch x heads x tq x tk]`.
    pub attention: Var,
}

impl Block {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, prefix: &str, d: usize, ffn: usize) -> Self {
        let mut w = |name: &str, shape: &[usize]| store.add(format!("{prefix}.{name}"), init.weight(shape));
        let wq = w("wq", &[d, d]);
        let wk = w("wk", &[d, d]);
        let wv = w("wv", &[d, d]);
        let wo = w("wo", &[d, d]);
        let w1 = w("w1", &[d, ffn]);
        let w2 = w("w2", &[ffn, d]);
        let mut b = |name: &str, len: usize| store.add(format!("{prefix}.{name}"), init.bias(len));
        let (bq, bk, bv, bo, b1, b2) = (b("bq", d), b("bk", d), b("bv", d), b("bo", d), b("b1", ffn), b("b2", d));
        let ln1_b = b("ln1_b", d);
        let ln2_b = b("ln2_b", d);
        let ln1_g = store.add(format!("{prefix}.ln1_g"), init.gain(d));
        let ln2_g = store.add(format!("{prefix}.ln2_g"), init.gain(d));
        Block {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
        }
    }

    /// `x` (`[batch*tq x d]`) attends to `memory` (`[batch*tk x d]`); pass
    /// `memory == x` for self-attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        memory: Var,
        key_mask: &[bool],
        batch: usize,
        heads: usize,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BlockOutput> {
        let q = linear(g, x, p[self.wq], p[self.bq])?;
        let k = linear(g, memory, p[self.wk], p[self.bk])?;
        let v = linear(g, memory, p[self.wv], p[self.bv])?;
        let attention = g.attention(q, k, v, key_mask, batch, heads)?;
        let a = linear(g, attention, p[self.wo], p[self.bo])?;
        let a = maybe_dropout(g, a, dropout, rng.as_deref_mut())?;
        let h = g.add(x, a)?;
        let h = g.layer_norm(h, p[self.ln1_g], p[self.ln1_b], LN_EPS)?;
        let f = linear(g, h, p[self.w1], p[self.b1])?;
        let f = g.gelu(f);
        let f = linear(g, f, p[self.w2], p[self.b2])?;
        let f = maybe_dropout(g, f, dropout, rng)?;
        let out = g.add(h, f)?;
        let out = g.layer_norm(out, p[self.ln2_g], p[self.ln2_b], LN_EPS)?;
        Ok(BlockOutput { out, attention })
    }
}
