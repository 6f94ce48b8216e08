//! Synthetic datasets with planted spatial and temporal structure.
//!
//! Each trial is a latent AR(1) process plus a per-subject channel offset.
//! Positive (fail) trials add a raised-cosine bump on the planted channels
//! inside the planted window and have their noise scaled down within one
//! designated subtask. Trials are emitted as raw intensity
//! `I = I0 * exp(-latent)`, so optical-density conversion recovers the
//! latent signal up to its mean.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::signal::dataset::DEFAULT_SAMPLE_RATE_HZ;
use crate::signal::{write_dataset, Interval, Label, Trial};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const AR_COEFF: f64 = 0.9;
const BASE_INTENSITY: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub channels: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub planted_channels: Vec<usize>,
    /// Fractional `[start, end)` of each trial's length.
    pub planted_window: [f64; 2],
    pub effect_size: f64,
    pub noise_std: f64,
    pub subtask_count: usize,
    /// Subtask in which positive trials have reduced noise.
    pub low_variability_subtask: usize,
    /// Noise multiplier inside the low-variability subtask.
    pub noise_reduction: f64,
    pub subject_offset_std: f64,
    /// Fraction of each subject's trials labeled positive (fail).
    pub positive_fraction: f64,
    pub sample_rate_hz: f64,
    pub task_id: String,
    pub seed: u64,
    pub ood_channels: usize,
    pub ood_planted_channels: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 8,
            trials_per_subject: 24,
            channels: 16,
            t_min: 120,
            t_max: 200,
            planted_channels: vec![2, 7, 11],
            planted_window: [0.5, 0.75],
            effect_size: 1.0,
            noise_std: 0.3,
            subtask_count: 4,
            low_variability_subtask: 1,
            noise_reduction: 0.5,
            subject_offset_std: 0.2,
            positive_fraction: 0.5,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            task_id: "synth".into(),
            seed: 0,
            ood_channels: 12,
            ood_planted_channels: vec![1, 5, 9],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.n_subjects == 0 || self.trials_per_subject == 0 {
            return fail("channels, n_subjects and trials_per_subject must be positive".into());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return fail(format!("invalid length range {}..={}", self.t_min, self.t_max));
        }
        if let Some(c) = self.planted_channels.iter().find(|&&c| c >= self.channels) {
            return fail(format!("planted channel {c} is outside 0..{}", self.channels));
        }
        let [s, e] = self.planted_window;
        if !(0.0 <= s && s < e && e <= 1.0) {
            return fail(format!("planted window [{s}, {e}) is not inside [0, 1]"));
        }
        if !(self.effect_size >= 0.0) || !(self.noise_std > 0.0) || !(self.subject_offset_std >= 0.0) {
            return fail("effect_size and subject_offset_std must be >= 0, noise_std > 0".into());
        }
        if self.subtask_count == 0 || self.subtask_count > self.t_min {
            return fail("subtask_count must lie in 1..=t_min".into());
        }
        if self.low_variability_subtask >= self.subtask_count {
            return fail("low_variability_subtask is not a valid subtask index".into());
        }
        if !(0.0..=1.0).contains(&self.noise_reduction) || !(0.0..=1.0).contains(&self.positive_fraction) {
            return fail("noise_reduction and positive_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// The out-of-distribution variant: a different channel count and
    /// remapped planted channels.
    pub fn ood(&self) -> SynthConfig {
        SynthConfig {
            channels: self.ood_channels,
            planted_channels: self.ood_planted_channels.clone(),
            task_id: format!("{}-ood", self.task_id),
            ..self.clone()
        }
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.channels).map(|c| format!("ch{c:02}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialTruth {
    pub trial_id: String,
    pub subject_id: String,
    pub label: Label,
    pub len: usize,
    /// Planted window in timesteps, half-open.
    pub window: [usize; 2],
    pub subtask_bounds: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub channels: usize,
    pub planted_channels: Vec<usize>,
    pub planted_window: [f64; 2],
    pub effect_size: f64,
    pub low_variability_subtask: usize,
    pub noise_reduction: f64,
    pub trials: Vec<TrialTruth>,
}

impl GroundTruth {
    pub fn positives(&self) -> usize {
        self.trials.iter().filter(|t| t.label.is_positive()).count()
    }
}

/// Equal-width subtasks tiling `[0, len)`.
pub fn tile_subtasks(len: usize, count: usize) -> Vec<Interval> {
    (0..count).map(|k| (k * len / count, (k + 1) * len / count)).collect()
}

/// Planted window of a trial of length `len`, in timesteps.
pub fn window_steps(len: usize, window: [f64; 2]) -> (usize, usize) {
    let s = (window[0] * len as f64).floor() as usize;
    let e = ((window[1] * len as f64).floor() as usize).clamp(s + 1, len);
    (s.min(len - 1), e)
}

/// Generates the raw-intensity trials and their ground truth in memory.
pub fn generate_trials(config: &SynthConfig) -> Result<(Vec<Trial>, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let innovation = config.noise_std * (1.0 - AR_COEFF * AR_COEFF).sqrt();
    let n_pos = (config.positive_fraction * config.trials_per_subject as f64).round() as usize;
    let mut trials = Vec::new();
    let mut truth = Vec::new();
    for s in 0..config.n_subjects {
        let subject = format!("s{s:02}");
        let offsets: Vec<f64> = (0..config.channels)
            .map(|_| config.subject_offset_std * noise.sample(&mut rng))
            .collect();
        let mut labels: Vec<Label> = (0..config.trials_per_subject)
            .map(|i| if i < n_pos { Label::Fail } else { Label::Pass })
            .collect();
        labels.shuffle(&mut rng);
        for (rep, &label) in labels.iter().enumerate() {
            let len = rng.gen_range(config.t_min..=config.t_max);
            let bounds = tile_subtasks(len, config.subtask_count);
            let (ws, we) = window_steps(len, config.planted_window);
            let quiet = bounds[config.low_variability_subtask];
            let positive = label.is_positive();
            let mut channels = Vec::with_capacity(config.channels);
            for (c, offset) in offsets.iter().enumerate() {
                let planted = positive && config.planted_channels.contains(&c);
                let mut state = config.noise_std * noise.sample(&mut rng);
                let mut ch = Vec::with_capacity(len);
                for t in 0..len {
                    if t > 0 {
                        state = AR_COEFF * state + innovation * noise.sample(&mut rng);
                    }
                    let scale = if positive && (quiet.0..quiet.1).contains(&t) {
                        config.noise_reduction
                    } else {
                        1.0
                    };
                    let mut latent = offset + scale * state;
                    if planted && (ws..we).contains(&t) {
                        let phase = (t - ws) as f64 + 0.5;
                        latent += config.effect_size * (std::f64::consts::PI * phase / (we - ws) as f64).sin().powi(2);
                    }
                    ch.push(BASE_INTENSITY * (-latent).exp());
                }
                channels.push(ch);
            }
            let trial_id = format!("{subject}_r{rep:02}");
            let mut trial = Trial::new(&trial_id, &subject, &config.task_id, label, rep as u32, channels)?
                .with_subtasks(bounds.clone())?;
            trial.sample_rate_hz = config.sample_rate_hz;
            truth.push(TrialTruth {
                trial_id,
                subject_id: subject.clone(),
                label,
                len,
                window: [ws, we],
                subtask_bounds: bounds.iter().map(|&(a, b)| [a, b]).collect(),
            });
            trials.push(trial);
        }
    }
    let gt = GroundTruth {
        channels: config.channels,
        planted_channels: config.planted_channels.clone(),
        planted_window: config.planted_window,
        effect_size: config.effect_size,
        low_variability_subtask: config.low_variability_subtask,
        noise_reduction: config.noise_reduction,
        trials: truth,
    };
    Ok((trials, gt))
}

/// Writes a dataset directory plus `ground_truth.json`.
pub fn generate(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let (trials, gt) = generate_trials(config)?;
    write_dataset(dir, &config.channel_names(), &trials)?;
    write_atomic(&dir.join(GROUND_TRUTH_FILE), serde_json::to_string_pretty(&gt)?.as_bytes())?;
    Ok(gt)
}

/// Reads `ground_truth.json` from a generated dataset directory.
pub fn ground_truth(dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = dir.as_ref().join(GROUND_TRUTH_FILE);
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
