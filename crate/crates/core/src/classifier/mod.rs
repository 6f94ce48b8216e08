//! Supervised pass/fail classifier over a frozen encoder: channel attention
//! at the base, label-token cross-attention decoder on top, and extraction
//! of channel and temporal attention maps.

mod channel;
mod decoder;
mod train;

pub use channel::{ChannelAttention, ChannelPass};
pub use decoder::{Decoder, DecoderPass};
pub(crate) use train::require_both_classes;
pub use train::{split_validation, train_one, train_supervised, SupervisedConfig};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::signal::{pad_batch, Batch, Trial};
use crate::tensor::{Graph, Initializer, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub channel_heads: usize,
    pub channel_dropout: f64,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub decoder_dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channel_heads: 16,
            channel_dropout: 0.5,
            decoder_heads: 5,
            decoder_ffn: 160,
            decoder_dropout: 0.1,
        }
    }
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// `false` bypasses the channel-attention module entirely.
    pub channel_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            channel_attention: true,
        }
    }
}

/// One ensemble member: a frozen encoder with its trained channel attention
/// and decoder.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub encoder: Encoder,
    pub channel: ChannelAttention,
    pub decoder: Decoder,
    pub seed: u64,
}

/// Graph leaves of a [`ClassifierModel`].
pub struct ModelBound {
    pub encoder: Bound,
    pub channel: Bound,
    pub decoder: Bound,
}

/// Nodes of one full forward pass.
pub struct ModelPass {
    pub logits: Var,
    pub gate: Option<Var>,
    pub decoder: DecoderPass,
}

impl ClassifierModel {
    /// Fresh channel attention and decoder on top of `encoder`, which is
    /// frozen.
    pub fn new(mut encoder: Encoder, config: &ClassifierConfig, init: &mut Initializer, seed: u64) -> Result<Self> {
        encoder.freeze();
        let ec = encoder.config;
        let channel = ChannelAttention::new(
            ec.input_channels,
            ec.d_model,
            config.channel_heads,
            config.channel_dropout,
            init,
        )?;
        let decoder = Decoder::new(ec.d_model, config.decoder_heads, config.decoder_ffn, config.decoder_dropout, init)?;
        Ok(ClassifierModel {
            encoder,
            channel,
            decoder,
            seed,
        })
    }

    pub fn channels(&self) -> usize {
        self.encoder.config.input_channels
    }

    pub fn bind(&self, g: &mut Graph) -> ModelBound {
        ModelBound {
            encoder: self.encoder.params().bind(g),
            channel: self.channel.params.bind(g),
            decoder: self.decoder.params.bind(g),
        }
    }

    /// Freezes channel attention and decoder (the encoder is always frozen).
    pub fn freeze(&mut self) {
        self.encoder.freeze();
        self.channel.params.set_trainable(false);
        self.decoder.params.set_trainable(false);
    }

    /// SHA-256 over the encoder, channel-attention and decoder checksums.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.encoder.checksum());
        h.update(self.channel.params.checksum());
        h.update(self.decoder.params.checksum());
        h.finalize().into()
    }

    /// Forward pass from a time-major input node `x` (`[batch*len x C]`).
    /// `batch` supplies the padding mask and lengths.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &ModelBound,
        x: Var,
        batch: &Batch,
        opts: ForwardOptions,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelPass> {
        let n = batch.size();
        let (x, gate) = if opts.channel_attention {
            let pass = self
                .channel
                .forward(g, &b.channel, x, &batch.mean_weights(), n, rng.as_deref_mut())?;
            (pass.out, Some(pass.gate))
        } else {
            (x, None)
        };
        let layers = self.encoder.forward(g, &b.encoder, x, &batch.mask, n, None)?;
        let decoder = self.decoder.forward(g, &b.decoder, &layers, &batch.mask, n, rng)?;
        Ok(ModelPass {
            logits: decoder.logits,
            gate,
            decoder,
        })
    }
}

/// Produces the model's input node for a padded batch.
pub trait InputStage {
    fn apply(&self, g: &mut Graph, batch: &Batch) -> Result<Var>;
}

/// Feeds the batch unchanged.
pub struct RawInput;

impl InputStage for RawInput {
    fn apply(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        g.constant(vec![batch.size() * batch.max_len, batch.channels], batch.time_major())
    }
}

/// Per-trial attention maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub trial_id: String,
    /// Head-averaged channel weights, sums to 1.
    pub channel_weights: Vec<f64>,
    /// Weights over the trial's valid timesteps, sums to 1.
    pub temporal_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Probability of the positive (fail) class per trial.
    pub probs: Vec<f64>,
    pub maps: Vec<AttentionMaps>,
}

pub const PREDICT_BATCH: usize = 32;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Evaluation-mode prediction for `trials`.
pub fn predict(
    model: &ClassifierModel,
    trials: &[Trial],
    input: &dyn InputStage,
    opts: ForwardOptions,
) -> Result<Prediction> {
    let mut probs = Vec::with_capacity(trials.len());
    let mut maps = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(PREDICT_BATCH) {
        let refs: Vec<&Trial> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let x = input.apply(&mut g, &batch)?;
        let pass = model.forward(&mut g, &bound, x, &batch, opts, None)?;
        probs.extend(g.value(pass.logits).iter().map(|&z| sigmoid(z)));
        let c = model.channels();
        let channel = match pass.gate {
            Some(gate) => channel::head_average(
                g.attention_probs(gate).expect("gate node"),
                batch.size(),
                model.channel.heads,
                c,
            ),
            None => vec![vec![1.0 / c as f64; c]; batch.size()],
        };
        let temporal =
            decoder::temporal_weights(&g, &pass.decoder, model.decoder.heads, &batch.lengths, batch.max_len);
        for ((t, cw), tw) in chunk.iter().zip(channel).zip(temporal) {
            maps.push(AttentionMaps {
                trial_id: t.trial_id.clone(),
                channel_weights: cw,
                temporal_weights: tw,
            });
        }
    }
    Ok(Prediction { probs, maps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// Mean probability over models.
    pub probs: Vec<f64>,
    /// `per_model[m][i]`: probability of trial `i` under model `m`.
    pub per_model: Vec<Vec<f64>>,
    pub maps: Vec<AttentionMaps>,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

/// Averages probabilities and attention maps over `models`.
pub fn predict_ensemble(
    models: &[ClassifierModel],
    trials: &[Trial],
    input: &dyn InputStage,
    opts: ForwardOptions,
) -> Result<EnsemblePrediction> {
    if models.is_empty() {
        return Err(Error::Contract("ensemble prediction needs at least one model".into()));
    }
    let preds = models
        .iter()
        .map(|m| predict(m, trials, input, opts))
        .collect::<Result<Vec<_>>>()?;
    let k = preds.len() as f64;
    let probs = (0..trials.len())
        .map(|i| preds.iter().map(|p| p.probs[i]).sum::<f64>() / k)
        .collect();
    let maps = (0..trials.len())
        .map(|i| {
            let mean = |get: &dyn Fn(&AttentionMaps) -> &Vec<f64>| {
                let n = get(&preds[0].maps[i]).len();
                let v = (0..n)
                    .map(|j| preds.iter().map(|p| get(&p.maps[i])[j]).sum::<f64>() / k)
                    .collect();
                normalized(v)
            };
            AttentionMaps {
                trial_id: preds[0].maps[i].trial_id.clone(),
                channel_weights: mean(&|m| &m.channel_weights),
                temporal_weights: mean(&|m| &m.temporal_weights),
            }
        })
        .collect();
    Ok(EnsemblePrediction {
        probs,
        per_model: preds.into_iter().map(|p| p.probs).collect(),
        maps,
    })
}

/// Writes attention maps as a JSON array.
pub fn write_attention_maps(path: impl AsRef<std::path::Path>, maps: &[AttentionMaps]) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), serde_json::to_string_pretty(maps)?.as_bytes())
}

#[cfg(test)]
mod tests;
