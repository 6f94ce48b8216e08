use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{linear, Block};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Initializer, Tensor, Var};

/// Label-token decoder: the token cross-attends to encoder layer 1, then
/// the result cross-attends to layer 2, and a linear head yields one logit.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub params: ParamStore,
    token: ParamId,
    blocks: [Block; 2],
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderPass {
    /// `[batch x 1]` logits of the positive (fail) class.
    pub logits: Var,
    /// Cross-attention nodes of both blocks, probabilities
    /// `[batch x heads x 1 x len]`.
    pub attention: [Var; 2],
}

impl Decoder {
    pub fn new(d_model: usize, heads: usize, ffn: usize, dropout: f64, init: &mut Initializer) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!("decoder: {d_model} not divisible by {heads} heads")));
        }
        let mut params = ParamStore::new();
        let token = params.add("decoder.token", init.weight(&[1, d_model]));
        let blocks = [
            Block::register(&mut params, init, "decoder.block0", d_model, ffn),
            Block::register(&mut params, init, "decoder.block1", d_model, ffn),
        ];
        let head_w = params.add("decoder.head_w", init.weight(&[d_model, 1]));
        let head_b = params.add("decoder.head_b", init.bias(1));
        Ok(Decoder {
            d_model,
            heads,
            dropout,
            params,
            token,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn zero_head(&mut self) {
        for id in [self.head_w, self.head_b] {
            let t = self.params.get_mut(id);
            let rg = t.requires_grad();
            *t = Tensor::zeros(t.shape());
            t.set_requires_grad(rg);
        }
    }

    /// `layers` holds the encoder outputs, each `[batch*len x d_model]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        layers: &[Var],
        key_mask: &[bool],
        batch: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderPass> {
        if layers.len() != 2 {
            return Err(Error::Contract(format!(
                "decoder needs both encoder layer outputs, got {}",
                layers.len()
            )));
        }
        let mut h = g.repeat_rows(p[self.token], batch)?;
        let mut attention = [h; 2];
        for (i, (block, &memory)) in self.blocks.iter().zip(layers).enumerate() {
            let o = block.forward(g, p, h, memory, key_mask, batch, self.heads, self.dropout, rng.as_deref_mut())?;
            h = o.out;
            attention[i] = o.attention;
        }
        let logits = linear(g, h, p[self.head_w], p[self.head_b])?;
        Ok(DecoderPass { logits, attention })
    }
}

/// Temporal weights per sequence over its valid steps: the mean over heads
/// and both blocks, renormalized.
pub(crate) fn temporal_weights(g: &Graph, pass: &DecoderPass, heads: usize, lengths: &[usize], len: usize) -> Vec<Vec<f64>> {
    let probs: Vec<&[f64]> = pass
        .attention
        .iter()
        .map(|&a| g.attention_probs(a).expect("attention node"))
        .collect();
    lengths
        .iter()
        .enumerate()
        .map(|(b, &valid)| {
            let mut w = vec![0.0; valid];
            for p in &probs {
                for h in 0..heads {
                    let row = &p[(b * heads + h) * len..(b * heads + h) * len + valid];
                    w.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
            }
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            w
        })
        .collect()
}
