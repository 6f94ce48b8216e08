use serde::{Deserialize, Serialize};

use super::dataset::Trial;
use super::johnson::{fit_johnson_sb, JohnsonSb};
use crate::error::{Error, Result};

pub const NORM_FLOOR: f64 = 1.0;
pub const NORM_CEIL: f64 = 11.0;

/// Per-channel Johnson SB fit plus the derived scaling bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub params: JohnsonSb,
    pub lo: f64,
    pub hi: f64,
}

impl ChannelNorm {
    pub fn from_params(params: JohnsonSb) -> Result<Self> {
        let (lo, hi) = params.bounds();
        if !(lo < hi) {
            return Err(Error::Spec(format!("degenerate bounds [{lo}, {hi}]")));
        }
        Ok(ChannelNorm { params, lo, hi })
    }

    /// `1 + 10 * clamp((x − lo) / (hi − lo), 0, 1)`.
    pub fn apply(&self, x: f64) -> f64 {
        NORM_FLOOR + (NORM_CEIL - NORM_FLOOR) * ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub channels: Vec<ChannelNorm>,
}

impl NormalizationSpec {
    /// Fits one Johnson SB per channel on the pooled samples of `trials`.
    /// Callers pass the training split only.
    pub fn fit(trials: &[Trial]) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InsufficientData("no trials to fit normalization on".into()))?;
        let c = first.channels();
        if trials.iter().any(|t| t.channels() != c) {
            return Err(Error::shape("trials disagree on channel count"));
        }
        let channels = (0..c)
            .map(|ch| {
                let pooled: Vec<f64> = trials.iter().flat_map(|t| t.channel(ch).iter().copied()).collect();
                let fit = fit_johnson_sb(&pooled)?;
                ChannelNorm::from_params(fit.params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NormalizationSpec { channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Packs `[gamma, delta, xi, lambda, lo, hi]` per channel, row-major.
    pub fn to_rows(&self) -> Vec<f64> {
        self.channels
            .iter()
            .flat_map(|c| [c.params.gamma, c.params.delta, c.params.xi, c.params.lambda, c.lo, c.hi])
            .collect()
    }

    pub fn from_rows(rows: &[f64]) -> Result<Self> {
        if !rows.len().is_multiple_of(6) {
            return Err(Error::Spec("normalization rows must have six values per channel".into()));
        }
        let channels = rows
            .chunks(6)
            .map(|r| {
                let params = JohnsonSb::new(r[0], r[1], r[2], r[3])?;
                if !(r[4] < r[5]) {
                    return Err(Error::Spec("lo must be below hi".into()));
                }
                Ok(ChannelNorm { params, lo: r[4], hi: r[5] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NormalizationSpec { channels })
    }
}

/// Scales every channel of `trial` into `[1, 11]`.
pub fn normalize(trial: &Trial, spec: &NormalizationSpec) -> Result<Trial> {
    if spec.len() < trial.channels() {
        return Err(Error::Spec(format!(
            "spec covers {} channels, trial {} has {}",
            spec.len(),
            trial.trial_id,
            trial.channels()
        )));
    }
    trial.map_channels(|c, x| Ok(x.iter().map(|&v| spec.channels[c].apply(v)).collect()))
}
