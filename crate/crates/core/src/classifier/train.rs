use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict, ClassifierConfig, ClassifierModel, ForwardOptions, InputStage, RawInput};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::signal::{pad_batch, Trial};
use crate::tensor::{AdamConfig, Graph, Initializer, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each class held out for best-epoch selection.
    pub val_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 200,
            batch_size: 20,
            val_fraction: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Stratified split of trial indices into (train, validation).
pub fn split_validation(trials: &[Trial], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for positive in [false, true] {
        let mut idx: Vec<usize> = (0..trials.len())
            .filter(|&i| trials[i].label.is_positive() == positive)
            .collect();
        idx.shuffle(rng);
        let n_val = if idx.len() >= 2 {
            ((fraction * idx.len() as f64).round() as usize).min(idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub(crate) fn require_both_classes(trials: &[Trial]) -> Result<()> {
    let pos = trials.iter().filter(|t| t.label.is_positive()).count();
    if pos == 0 || pos == trials.len() {
        return Err(Error::Training {
            epoch: 0,
            message: "training data contains a single class".into(),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities against trial labels.
pub(crate) fn bce(probs: &[f64], trials: &[Trial]) -> f64 {
    let eps = 1e-12;
    probs
        .iter()
        .zip(trials)
        .map(|(&p, t)| {
            let p = p.clamp(eps, 1.0 - eps);
            if t.label.is_positive() {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len() as f64
}

/// Trains channel attention and decoder for one frozen encoder. The model
/// with the lowest validation loss seen at the end of any epoch is kept.
pub fn train_one(
    trials: &[Trial],
    encoder: &Encoder,
    classifier: &ClassifierConfig,
    config: &SupervisedConfig,
    seed: u64,
) -> Result<ClassifierModel> {
    config.validate()?;
    require_both_classes(trials)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(2);
    let mut model = ClassifierModel::new(encoder.clone(), classifier, &mut Initializer::new(init_rng), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let (mut train_idx, val_idx) = split_validation(trials, config.val_fraction, &mut rng);
    let val: Vec<Trial> = val_idx.iter().map(|&i| trials[i].clone()).collect();
    let mut opt_channel = OptimizerState::new(config.adam);
    let mut opt_decoder = OptimizerState::new(config.adam);
    let mut best: Option<(f64, ClassifierModel)> = None;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let refs: Vec<&Trial> = chunk.iter().map(|&i| &trials[i]).collect();
            let labels: Vec<f64> = refs.iter().map(|t| t.label.as_f64()).collect();
            let batch = pad_batch(&refs)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let x = RawInput.apply(&mut g, &batch)?;
            let pass = model.forward(&mut g, &bound, x, &batch, ForwardOptions::default(), Some(&mut rng))?;
            let loss = g.bce_with_logits(pass.logits, &labels)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "classification loss is not finite".into(),
                });
            }
            train_loss += value * refs.len() as f64;
            let mut grads = g.backward(loss)?;
            model.channel.params.collect_grads(&bound.channel, &mut grads)?;
            model.decoder.params.collect_grads(&bound.decoder, &mut grads)?;
            model.channel.params.step(&mut opt_channel)?;
            model.decoder.params.step(&mut opt_decoder)?;
            model.channel.params.zero_grads();
            model.decoder.params.zero_grads();
        }
        let train_loss = train_loss / train_idx.len() as f64;
        let score = if val.is_empty() {
            train_loss
        } else {
            bce(&predict(&model, &val, &RawInput, ForwardOptions::default())?.probs, &val)
        };
        log::debug!("supervised seed {seed} epoch {epoch}: train {train_loss:.4} val {score:.4}");
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.clone()));
        }
    }
    let (_, mut model) = best.expect("at least one epoch");
    model.freeze();
    Ok(model)
}

/// One classifier per pretrained encoder; `seeds[i]` initializes the
/// decoder on top of `encoders[i]`.
pub fn train_supervised(
    trials: &[Trial],
    encoders: &[Encoder],
    classifier: &ClassifierConfig,
    config: &SupervisedConfig,
    seeds: &[u64],
) -> Result<Vec<ClassifierModel>> {
    if encoders.len() != seeds.len() || encoders.is_empty() {
        return Err(Error::config(format!(
            "{} encoders but {} seeds",
            encoders.len(),
            seeds.len()
        )));
    }
    encoders
        .iter()
        .zip(seeds)
        .map(|(e, &s)| train_one(trials, e, classifier, config, s))
        .collect()
}
