//! Trial ingestion and preprocessing: optical density, zero-phase band-pass,
//! Johnson SB normalization into `[1, 11]`, padding and mask sampling.

mod batch;
pub mod dataset;
pub mod filter;
pub mod johnson;
mod masking;
pub mod normal;
mod normalize;
mod od;

pub use batch::{pad_batch, Batch};
pub use dataset::{load_dataset, write_dataset, Interval, Label, Manifest, Trial};
pub use filter::bandpass;
pub use johnson::{derive_bounds, fit_johnson_sb, johnson_quantile, JohnsonSb};
pub use masking::{sample_mask_segments, Segment, SEGMENT_LEN};
pub use normalize::{normalize, ChannelNorm, NormalizationSpec, NORM_CEIL, NORM_FLOOR};
pub use od::od_convert;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            lo_hz: filter::DEFAULT_LO_HZ,
            hi_hz: filter::DEFAULT_HI_HZ,
        }
    }
}

/// Raw intensity to band-passed optical density, channel by channel.
pub fn preprocess(trial: &Trial, cfg: &PreprocessConfig) -> Result<Trial> {
    let fs = trial.sample_rate_hz;
    trial.map_channels(|_, x| bandpass(&od_convert(x)?, fs, cfg.lo_hz, cfg.hi_hz))
}

/// Preprocesses every trial, fits normalization on the trials selected by
/// `fit_on` and normalizes all of them.
pub fn prepare(
    trials: &[Trial],
    cfg: &PreprocessConfig,
    fit_on: impl Fn(&Trial) -> bool,
) -> Result<(Vec<Trial>, NormalizationSpec)> {
    let filtered = trials.iter().map(|t| preprocess(t, cfg)).collect::<Result<Vec<_>>>()?;
    let train: Vec<Trial> = filtered.iter().filter(|t| fit_on(t)).cloned().collect();
    let spec = NormalizationSpec::fit(&train)?;
    let normalized = filtered.iter().map(|t| normalize(t, &spec)).collect::<Result<Vec<_>>>()?;
    Ok((normalized, spec))
}

/// Preprocesses and normalizes with an existing spec.
pub fn apply_spec(trials: &[Trial], cfg: &PreprocessConfig, spec: &NormalizationSpec) -> Result<Vec<Trial>> {
    trials
        .iter()
        .map(|t| normalize(&preprocess(t, cfg)?, spec))
        .collect()
}
