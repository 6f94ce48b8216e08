//! One declarative TOML file holding every module's settings.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, KshotConfig};
use crate::classifier::{ClassifierConfig, SupervisedConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interpret::DEFAULT_TOP_MASS;
use crate::pretrain::PretrainConfig;
use crate::signal::{PreprocessConfig, Trial};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Fraction of subjects (the last ones in sorted order) held out for
    /// evaluation, ablation and attention analyses.
    pub test_fraction: f64,
    pub threshold: f64,
    pub bootstrap_n: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            test_fraction: 0.25,
            threshold: 0.5,
            bootstrap_n: 1000,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Attention mass covered by the top-channel set.
    pub mass: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { mass: DEFAULT_TOP_MASS }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for data generation and protocols.
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub classifier: ClassifierConfig,
    pub supervised: SupervisedConfig,
    pub adapter: AdapterConfig,
    pub kshot: KshotConfig,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.supervised.validate()?;
        self.adapter.validate()?;
        self.kshot.validate()?;
        let e = &self.evaluation;
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(Error::config("evaluation.test_fraction must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&e.threshold) {
            return Err(Error::config("evaluation.threshold must lie in [0, 1]"));
        }
        if e.bootstrap_n < 100 {
            return Err(Error::config("evaluation.bootstrap_n must be at least 100"));
        }
        if !(self.ablation.mass > 0.0 && self.ablation.mass <= 1.0) {
            return Err(Error::config("ablation.mass must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Splits subjects into (train, test): the last `ceil(fraction * n)`
/// subjects in sorted order are held out, leaving at least one for training.
pub fn split_subjects(trials: &[Trial], fraction: f64) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let subjects: Vec<String> = trials
        .iter()
        .map(|t| t.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if subjects.len() < 2 {
        return Err(Error::Protocol(format!(
            "a subject-level split needs at least two subjects, found {}",
            subjects.len()
        )));
    }
    let n_test = ((fraction * subjects.len() as f64).ceil() as usize).clamp(1, subjects.len() - 1);
    let cut = subjects.len() - n_test;
    Ok((
        subjects[..cut].iter().cloned().collect(),
        subjects[cut..].iter().cloned().collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_file_parses_to_defaults() {
        let text = include_str!("../../../configs/default.toml");
        assert_eq!(RunConfig::from_toml(text).unwrap(), RunConfig::default());
    }

    #[test]
    fn desk_file_overrides_only_what_it_lists() {
        let cfg = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(cfg.pretrain.batch_size, 1);
        assert_eq!(cfg.pretrain.adam.lr, 5e-4);
        assert_eq!(cfg.pretrain.adam.beta2, RunConfig::default().pretrain.adam.beta2);
        assert_eq!(cfg.encoder, RunConfig::default().encoder);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Toml(_))));
        assert!(matches!(
            RunConfig::from_toml("[encoder]\nd_modl = 80"),
            Err(Error::Toml(_))
        ));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[pretrain]\nmax_epochs = 10"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("[ablation]\nmass = 0.0"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.adapter.hidden = Some(12);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
