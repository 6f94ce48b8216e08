//! Masked-segment reconstruction pretraining of the encoder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::layers::linear;
use crate::params::{ParamId, ParamStore};
use crate::signal::{pad_batch, sample_mask_segments, Batch, Segment, Trial};
use crate::tensor::{AdamConfig, Graph, Initializer, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub plateau_threshold: f64,
    pub plateau_patience: usize,
    pub mask_budget: f64,
    pub n_seeds: usize,
    pub seeds: Vec<u64>,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 1000,
            batch_size: 20,
            plateau_threshold: 1e-3,
            plateau_patience: 300,
            mask_budget: 0.15,
            n_seeds: 9,
            seeds: (0..9).collect(),
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("max_epochs and batch_size must be positive"));
        }
        if self.plateau_patience > self.max_epochs {
            return Err(Error::config("plateau_patience exceeds max_epochs"));
        }
        if self.n_seeds == 0 || self.seeds.len() != self.n_seeds {
            return Err(Error::config(format!(
                "n_seeds is {} but {} seeds are listed",
                self.n_seeds,
                self.seeds.len()
            )));
        }
        if !(self.mask_budget > 0.0 && self.mask_budget < 1.0) {
            return Err(Error::config("mask_budget must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Early stopping on a loss that has stopped improving.
///
/// An epoch improves when its loss is more than `threshold` below the best
/// loss recorded at the last improvement. Training stops once `patience`
/// consecutive epochs pass without improvement, or at `max_epochs`.
#[derive(Debug, Clone)]
pub struct PlateauRule {
    threshold: f64,
    patience: usize,
    max_epochs: usize,
    best: f64,
    since_best: usize,
    epochs: usize,
}

impl PlateauRule {
    pub fn new(threshold: f64, patience: usize, max_epochs: usize) -> Self {
        PlateauRule {
            threshold,
            patience,
            max_epochs,
            best: f64::INFINITY,
            since_best: 0,
            epochs: 0,
        }
    }

    pub fn from_config(cfg: &PretrainConfig) -> Self {
        Self::new(cfg.plateau_threshold, cfg.plateau_patience, cfg.max_epochs)
    }

    /// Records one epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs += 1;
        if loss < self.best - self.threshold {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience || self.epochs >= self.max_epochs
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Number of epochs a loss stream would run before the rule stops it.
pub fn stopping_epoch(losses: impl IntoIterator<Item = f64>, rule: PlateauRule) -> usize {
    let mut rule = rule;
    for loss in losses {
        if rule.observe(loss) {
            break;
        }
    }
    rule.epochs
}

/// A batch with masked segments zeroed out.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// The input batch with every masked step set to 0 in all channels.
    pub batch: Batch,
    /// `[batch x max_len]`, true where attention may look: valid and unmasked.
    pub key_mask: Vec<bool>,
    /// Original values, time-major `[batch*max_len x channels]`.
    pub target: Vec<f64>,
    /// Time-major indicator of the cells to reconstruct.
    pub indicator: Vec<bool>,
}

impl MaskedBatch {
    pub fn masked_cells(&self) -> usize {
        self.indicator.iter().filter(|&&m| m).count()
    }

    /// Original values of the masked cells in time-major order.
    pub fn targets(&self) -> Vec<f64> {
        self.target
            .iter()
            .zip(&self.indicator)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect()
    }
}

/// Zeroes the given segments (one list per sequence) across all channels.
pub fn apply_mask(batch: &Batch, segments: &[Vec<Segment>]) -> Result<MaskedBatch> {
    if segments.len() != batch.size() {
        return Err(Error::shape(format!(
            "{} segment lists for a batch of {}",
            segments.len(),
            batch.size()
        )));
    }
    let (c, t) = (batch.channels, batch.max_len);
    let target = batch.time_major();
    let mut masked = batch.clone();
    let mut key_mask = batch.mask.clone();
    let mut indicator = vec![false; target.len()];
    for (b, segs) in segments.iter().enumerate() {
        for s in segs {
            if s.end() > batch.lengths[b] {
                return Err(Error::Contract(format!(
                    "segment {}..{} exceeds valid length {} of sequence {b}",
                    s.start,
                    s.end(),
                    batch.lengths[b]
                )));
            }
            for step in s.start..s.end() {
                key_mask[b * t + step] = false;
                for ch in 0..c {
                    masked.signal[(b * c + ch) * t + step] = 0.0;
                    indicator[(b * t + step) * c + ch] = true;
                }
            }
        }
    }
    Ok(MaskedBatch {
        batch: masked,
        key_mask,
        target,
        indicator,
    })
}

/// Mean squared error over the indicated cells.
pub fn reconstruction_loss(predicted: &[f64], target: &[f64], indicator: &[bool]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.len() != indicator.len() {
        return Err(Error::shape("prediction, target and indicator differ in size"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..predicted.len() {
        if indicator[i] {
            let d = predicted[i] - target[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(sum / n as f64)
}

/// Linear map from the last encoder layer back to the input channels.
#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    pub params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl ReconstructionHead {
    pub fn new(d_model: usize, channels: usize, init: &mut Initializer) -> Self {
        let mut params = ParamStore::new();
        let w = params.add("head.w", init.weight(&[d_model, channels]));
        let b = params.add("head.b", init.bias(channels));
        ReconstructionHead { params, w, b }
    }
}

/// Masked MSE of one batch as a graph; returns the graph, the loss node and
/// the bound parameter leaves of encoder and head.
pub fn masked_loss(
    encoder: &Encoder,
    head: &ReconstructionHead,
    mb: &MaskedBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Graph, crate::tensor::Var, crate::params::Bound, crate::params::Bound)> {
    let batch = &mb.batch;
    let mut g = Graph::new();
    let pe = encoder.params().bind(&mut g);
    let ph = head.params.bind(&mut g);
    let x = g.constant(vec![batch.size() * batch.max_len, batch.channels], batch.time_major())?;
    let outs = encoder.forward(&mut g, &pe, x, &mb.key_mask, batch.size(), rng)?;
    let last = *outs.last().expect("encoder has layers");
    let pred = linear(&mut g, last, ph[head.w], ph[head.b])?;
    let loss = g.masked_mse(pred, &mb.target, &mb.indicator)?;
    Ok((g, loss, pe, ph))
}

fn mask_batch(trials: &[&Trial], budget: f64, rng: &mut ChaCha8Rng) -> Result<Option<MaskedBatch>> {
    let batch = pad_batch(trials)?;
    let segments: Vec<Vec<Segment>> = batch
        .lengths
        .iter()
        .map(|&len| sample_mask_segments(len, budget, rng))
        .collect();
    let mb = apply_mask(&batch, &segments)?;
    Ok((mb.masked_cells() > 0).then_some(mb))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    pub head: ReconstructionHead,
    /// Mean masked MSE per epoch.
    pub history: Vec<f64>,
    pub seed: u64,
}

/// Trains a fresh encoder (initialized from `seed`) to reconstruct masked
/// segments of `trials`, which must already be normalized.
pub fn pretrain_run(
    trials: &[Trial],
    encoder_config: EncoderConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if trials.is_empty() {
        return Err(Error::InsufficientData("pretraining needs at least one trial".into()));
    }
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed));
    let mut encoder = Encoder::with_initializer(encoder_config, &mut init)?;
    let mut head = ReconstructionHead::new(encoder_config.d_model, encoder_config.input_channels, &mut init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt_enc = OptimizerState::new(config.adam);
    let mut opt_head = OptimizerState::new(config.adam);
    let mut rule = PlateauRule::from_config(config);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut cells) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let members: Vec<&Trial> = chunk.iter().map(|&i| &trials[i]).collect();
            let Some(mb) = mask_batch(&members, config.mask_budget, &mut rng)? else {
                continue;
            };
            let (g, loss, pe, ph) = masked_loss(&encoder, &head, &mb, Some(&mut rng))?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "reconstruction loss is not finite".into(),
                });
            }
            let n = mb.masked_cells();
            total += value * n as f64;
            cells += n;
            let mut grads = g.backward(loss)?;
            encoder.params_mut().collect_grads(&pe, &mut grads)?;
            head.params.collect_grads(&ph, &mut grads)?;
            encoder.params_mut().step(&mut opt_enc)?;
            head.params.step(&mut opt_head)?;
            encoder.params_mut().zero_grads();
            head.params.zero_grads();
        }
        if cells == 0 {
            return Err(Error::InsufficientData("no trial is long enough to mask".into()));
        }
        let epoch_loss = total / cells as f64;
        history.push(epoch_loss);
        log::debug!("pretrain seed {seed} epoch {epoch}: {epoch_loss:.5}");
        if rule.observe(epoch_loss) {
            break;
        }
    }
    Ok(PretrainOutcome {
        encoder,
        head,
        history,
        seed,
    })
}

/// Masked MSE in eval mode (no dropout), averaged over `draws` fresh masks.
pub fn evaluate_reconstruction(
    encoder: &Encoder,
    head: &ReconstructionHead,
    trials: &[Trial],
    config: &PretrainConfig,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut cells) = (0.0, 0usize);
    for _ in 0..draws {
        for chunk in trials.chunks(config.batch_size) {
            let members: Vec<&Trial> = chunk.iter().collect();
            let Some(mb) = mask_batch(&members, config.mask_budget, &mut rng)? else {
                continue;
            };
            let (g, loss, _, _) = masked_loss(encoder, head, &mb, None)?;
            let n = mb.masked_cells();
            total += g.value(loss)[0] * n as f64;
            cells += n;
        }
    }
    if cells == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(total / cells as f64)
}

/// Writes `epoch,loss` rows (epochs counted from 1).
pub fn write_history(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, loss));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Trailing moving average with window `w` (one value per full window).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    xs.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Label;

    fn trial(len: usize, base: f64) -> Trial {
        let ch = (0..2).map(|c| (0..len).map(|t| base + (t + c) as f64 * 0.1).collect()).collect();
        Trial::new("t", "s", "k", Label::Pass, 0, ch).unwrap()
    }

    #[test]
    fn plateau_at_fifty_stops_at_three_fifty() {
        let stream = (1..=1000).map(|e| if e <= 50 { 1.0 - e as f64 * 0.01 } else { 0.5 });
        assert_eq!(stopping_epoch(stream, PlateauRule::new(1e-3, 300, 1000)), 350);
    }

    #[test]
    fn steady_improvement_runs_to_cap() {
        let stream = (1..=2000).map(|e| 10.0 - e as f64 * 0.002);
        assert_eq!(stopping_epoch(stream, PlateauRule::new(1e-3, 300, 1000)), 1000);
    }

    #[test]
    fn sub_threshold_gains_do_not_reset_patience() {
        let stream = (1..=1000).map(|e| if e == 1 { 1.0 } else { 1.0 - e as f64 * 1e-6 });
        assert_eq!(stopping_epoch(stream, PlateauRule::new(1e-3, 300, 1000)), 301);
    }

    #[test]
    fn no_segments_leaves_batch_unchanged() {
        let (a, b) = (trial(6, 2.0), trial(4, 3.0));
        let batch = pad_batch(&[&a, &b]).unwrap();
        let mb = apply_mask(&batch, &[vec![], vec![]]).unwrap();
        assert_eq!(mb.batch, batch);
        assert_eq!(mb.key_mask, batch.mask);
        assert!(mb.targets().is_empty());
    }

    #[test]
    fn segment_zeroes_all_channels() {
        let a = trial(10, 2.0);
        let batch = pad_batch(&[&a]).unwrap();
        let mb = apply_mask(&batch, &[vec![Segment { start: 4, len: 3 }]]).unwrap();
        for c in 0..2 {
            for t in 0..10 {
                let expect = if (4..7).contains(&t) { 0.0 } else { a.at(c, t) };
                assert_eq!(mb.batch.at(0, c, t), expect);
            }
        }
        assert_eq!(mb.masked_cells(), 3 * 2);
        assert_eq!(mb.targets(), vec![a.at(0, 4), a.at(1, 4), a.at(0, 5), a.at(1, 5), a.at(0, 6), a.at(1, 6)]);
        assert!(!mb.key_mask[4] && !mb.key_mask[6] && mb.key_mask[7]);
    }

    #[test]
    fn segment_past_valid_length_is_rejected() {
        let (a, b) = (trial(10, 2.0), trial(5, 2.0));
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert!(apply_mask(&batch, &[vec![], vec![Segment { start: 3, len: 3 }]]).is_err());
    }

    #[test]
    fn loss_hand_values() {
        assert_eq!(reconstruction_loss(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        let l = reconstruction_loss(&[1.0, 0.0, 3.0], &[0.0, 9.0, 0.0], &[true, false, true]).unwrap();
        assert_eq!(l, 5.0);
        assert!(matches!(reconstruction_loss(&[1.0], &[0.0], &[false]), Err(Error::UndefinedLoss)));
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig::default().validate().is_ok());
        let bad = PretrainConfig {
            plateau_patience: 2000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PretrainConfig {
            n_seeds: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
