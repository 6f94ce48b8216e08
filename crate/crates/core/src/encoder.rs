//! Two-layer transformer encoder over per-timestep channel vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{linear, maybe_dropout, positional_encoding, Block};
use crate::params::{Bound, ParamId, ParamStore};
use crate::signal::Batch;
use crate::tensor::{Graph, Initializer, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 80,
            n_heads: 5,
            ffn_hidden: 160,
            dropout: 0.1,
            input_channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers != 2 {
            return Err(Error::config(format!("encoder has exactly 2 layers, got {}", self.n_layers)));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_hidden == 0 || self.input_channels == 0 {
            return Err(Error::config("ffn_hidden and input_channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    params: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed));
        Self::with_initializer(config, &mut init)
    }

    pub fn with_initializer(config: EncoderConfig, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.input_channels, config.d_model);
        let mut params = ParamStore::new();
        let embed_w = params.add("encoder.embed_w", init.weight(&[c, d]));
        let embed_b = params.add("encoder.embed_b", init.bias(d));
        let blocks = (0..config.n_layers)
            .map(|l| Block::register(&mut params, init, &format!("encoder.layer{l}"), d, config.ffn_hidden))
            .collect();
        Ok(Encoder {
            config,
            params,
            embed_w,
            embed_b,
            blocks,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.params.checksum()
    }

    /// Runs the encoder on time-major input `x` (`[batch*len x C]`).
    ///
    /// `key_mask` (`[batch x len]`) marks the timesteps other positions may
    /// attend to. Returns one `[batch*len x d_model]` output per layer.
    /// Passing an rng enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        key_mask: &[bool],
        batch: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != cfg.input_channels {
            return Err(Error::shape(format!(
                "encoder expects {} channels, input has shape {shape:?}",
                cfg.input_channels
            )));
        }
        if batch == 0 || !shape[0].is_multiple_of(batch) || key_mask.len() != shape[0] {
            return Err(Error::shape("encoder: rows, batch and key mask disagree"));
        }
        let len = shape[0] / batch;
        let pe = positional_encoding(len, cfg.d_model);
        let tiled: Vec<f64> = pe.iter().copied().cycle().take(pe.len() * batch).collect();
        let pe = g.constant(vec![batch * len, cfg.d_model], tiled)?;
        let h = linear(g, x, p[self.embed_w], p[self.embed_b])?;
        let h = g.add(h, pe)?;
        let mut h = maybe_dropout(g, h, cfg.dropout, rng.as_deref_mut())?;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let o = block.forward(g, p, h, h, key_mask, batch, cfg.n_heads, cfg.dropout, rng.as_deref_mut())?;
            h = o.out;
            outputs.push(h);
        }
        Ok(outputs)
    }
}

/// Evaluates the encoder on a padded batch and returns the values of both
/// layer outputs, each `[batch*max_len x d_model]` (time-major).
pub fn encoder_forward(batch: &Batch, encoder: &Encoder, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec<f64>>> {
    if batch.channels != encoder.config.input_channels {
        return Err(Error::shape(format!(
            "batch has {} channels, encoder expects {}",
            batch.channels, encoder.config.input_channels
        )));
    }
    let mut g = Graph::new();
    let p = encoder.params().bind(&mut g);
    let x = g.constant(vec![batch.size() * batch.max_len, batch.channels], batch.time_major())?;
    let outs = encoder.forward(&mut g, &p, x, &batch.mask, batch.size(), rng)?;
    Ok(outs.into_iter().map(|v| g.value(v).to_vec()).collect())
}
