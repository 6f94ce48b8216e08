use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::positional_encoding;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Initializer, Tensor, Var};

/// Channel attention at the base of the pipeline.
///
/// Each of `heads` heads projects one fixed query (the positional encoding
/// of index `channels`) against per-channel keys built from the channel's
/// positional encoding and its mean over valid timesteps. A head's weight on
/// a channel multiplies that channel's value, a sigmoid of its projected
/// descriptor times the squared per-head output scale and the channel count.
/// The head average is the channel gain, which is never negative, and the
/// output is `x + gain * x` over the whole series. Under uniform weights the
/// gain equals the mean value, so a weight above `1 / channels` marks a
/// channel amplified relative to the rest.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub heads: usize,
    pub dropout: f64,
    pub params: ParamStore,
    d: usize,
    wq: ParamId,
    wk: ParamId,
    uk: ParamId,
    uv: ParamId,
    bv: ParamId,
    out: ParamId,
}

/// Nodes produced by one channel-attention pass.
#[derive(Debug, Clone, Copy)]
pub struct ChannelPass {
    pub out: Var,
    /// `channel_gate` node; probabilities are `[batch x heads x channels]`.
    pub gate: Var,
}

impl ChannelAttention {
    pub fn new(channels: usize, d: usize, heads: usize, dropout: f64, init: &mut Initializer) -> Result<Self> {
        if channels == 0 || heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "channel attention: width {d} is not divisible by {heads} heads"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config("channel attention dropout must lie in [0, 1)"));
        }
        let mut params = ParamStore::new();
        let wq = params.add("channel.wq", init.weight(&[d, d]));
        let wk = params.add("channel.wk", init.weight(&[d, d]));
        let uk = params.add("channel.uk", init.weight(&[1, d]));
        let uv = params.add("channel.uv", init.weight(&[1, heads]));
        let bv = params.add("channel.bv", Tensor::zeros(&[1, heads]).trainable());
        let out = params.add("channel.out", Tensor::ones(&[heads]).trainable());
        Ok(ChannelAttention {
            channels,
            heads,
            dropout,
            params,
            d,
            wq,
            wk,
            uk,
            uv,
            bv,
            out,
        })
    }

    /// Zeroes the value and output projections, turning the module into
    /// the identity map.
    pub fn zero_values(&mut self) {
        for id in [self.uv, self.bv, self.out] {
            let t = self.params.get_mut(id);
            let rg = t.requires_grad();
            *t = Tensor::zeros(t.shape());
            t.set_requires_grad(rg);
        }
    }

    /// `x` is time-major `[batch*len x channels]`; `mean_weights`
    /// (`[batch*len]`) averages each sequence over its valid steps.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mean_weights: &[f64],
        batch: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ChannelPass> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.channels || batch == 0 || !shape[0].is_multiple_of(batch) {
            return Err(Error::shape(format!(
                "channel attention for {} channels got input {shape:?}",
                self.channels
            )));
        }
        let len = shape[0] / batch;
        let (c, d) = (self.channels, self.d);
        let table = positional_encoding(c + 1, d);
        let pos = g.constant(vec![c, d], table[..c * d].to_vec())?;
        let query_pos = g.constant(vec![1, d], table[c * d..].to_vec())?;

        let desc = g.group_mean(x, mean_weights.to_vec(), len)?;
        let desc = g.reshape(desc, vec![batch * c, 1])?;

        let q = g.matmul(query_pos, p[self.wq])?;
        let kc = g.matmul(pos, p[self.wk])?;
        let kc = g.repeat_rows(kc, batch)?;
        let kd = g.matmul(desc, p[self.uk])?;
        let k = g.add(kc, kd)?;
        let v = g.matmul(desc, p[self.uv])?;
        let v = g.add_row(v, p[self.bv])?;
        let v = g.sigmoid(v);
        let out_scale = g.mul(p[self.out], p[self.out])?;
        let v = g.mul_row(v, out_scale)?;
        let v = g.scale(v, c as f64);

        let gate = g.channel_gate(q, k, v, batch, self.heads, self.dropout, rng)?;
        let scaled = g.scale_groups(x, gate, len)?;
        let out = g.add(x, scaled)?;
        Ok(ChannelPass { out, gate })
    }
}

/// Head-averaged channel weights per sequence, `[batch][channels]`.
pub(crate) fn head_average(probs: &[f64], batch: usize, heads: usize, channels: usize) -> Vec<Vec<f64>> {
    (0..batch)
        .map(|b| {
            (0..channels)
                .map(|c| (0..heads).map(|h| probs[(b * heads + h) * channels + c]).sum::<f64>() / heads as f64)
                .collect()
        })
        .collect()
}
