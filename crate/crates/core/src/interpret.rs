//! Attention analyses: ensemble channel-attention aggregation, top-mass
//! channel selection, the channel ablation harness, subtask-averaged
//! temporal attention and subtask signal variability.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{predict, predict_ensemble, ClassifierModel, ForwardOptions, InputStage, RawInput};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{bootstrap_ci, labels_of, percentile, pr_auc, roc_auc};
use crate::signal::dataset::validate_intervals;
use crate::signal::{Batch, Interval, Trial};
use crate::tensor::{Graph, Var};

pub const DEFAULT_TOP_MASS: f64 = 0.7;

/// Cumulative sums within this distance of the target mass count as reaching it.
const MASS_TOLERANCE: f64 = 1e-12;

/// Mean channel weights of one model over `trials`.
pub fn model_channel_weights(model: &ClassifierModel, trials: &[Trial]) -> Result<Vec<f64>> {
    if trials.is_empty() {
        return Err(Error::InsufficientData("no trials to collect channel attention on".into()));
    }
    let pred = predict(model, trials, &RawInput, ForwardOptions::default())?;
    let c = model.channels();
    let mut mean = vec![0.0; c];
    for m in &pred.maps {
        for (acc, w) in mean.iter_mut().zip(&m.channel_weights) {
            *acc += w / trials.len() as f64;
        }
    }
    Ok(mean)
}

/// Elementwise mean of per-model channel weights, renormalized to sum 1.
pub fn aggregate_channel_attention(per_model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::InsufficientData("no channel weights to aggregate".into()))?;
    if first.is_empty() || per_model.iter().any(|w| w.len() != first.len()) {
        return Err(Error::shape("channel weights differ in channel count across models"));
    }
    let k = per_model.len() as f64;
    let mean: Vec<f64> = (0..first.len())
        .map(|c| per_model.iter().map(|w| w[c]).sum::<f64>() / k)
        .collect();
    let total: f64 = mean.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("channel weights have no positive mass".into()));
    }
    Ok(mean.into_iter().map(|w| w / total).collect())
}

/// Smallest set of channels, taken by descending weight with ties broken by
/// ascending index, whose cumulative weight reaches `mass`. Returned sorted.
pub fn select_top_attention(weights: &[f64], mass: f64) -> Result<Vec<usize>> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::config(format!("attention mass {mass} is outside (0, 1]")));
    }
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Domain("channel weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut top = Vec::new();
    for c in order {
        top.push(c);
        cum += weights[c] / total;
        if cum >= mass - MASS_TOLERANCE {
            break;
        }
    }
    top.sort_unstable();
    Ok(top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationCondition {
    /// The top-attention channels are zero-filled.
    Top70Dropped,
    /// Every channel outside the top-attention set is zero-filled.
    RemainingDropped,
    /// The channel-attention module is bypassed.
    NoAttention,
    /// The unmodified model.
    NoneWithChannelAttention,
}

impl AblationCondition {
    pub const ALL: [AblationCondition; 4] = [
        AblationCondition::Top70Dropped,
        AblationCondition::RemainingDropped,
        AblationCondition::NoAttention,
        AblationCondition::NoneWithChannelAttention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationCondition::Top70Dropped => "top70_dropped",
            AblationCondition::RemainingDropped => "remaining_dropped",
            AblationCondition::NoAttention => "no_attention",
            AblationCondition::NoneWithChannelAttention => "none_with_channel_attention",
        }
    }
}

impl std::str::FromStr for AblationCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationCondition::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation condition {s:?}")))
    }
}

/// Feeds the batch with some channels zero-filled.
pub struct DroppedInput {
    pub channels: Vec<usize>,
}

impl InputStage for DroppedInput {
    fn apply(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        if let Some(&c) = self.channels.iter().find(|&&c| c >= batch.channels) {
            return Err(Error::shape(format!("cannot drop channel {c} of {}", batch.channels)));
        }
        let mut b = batch.clone();
        b.drop_channels(&self.channels);
        RawInput.apply(g, &b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub condition: AblationCondition,
    /// Zero-filled channels.
    pub dropped: Vec<usize>,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub roc_auc_ci: (f64, f64),
    pub pr_auc_ci: (f64, f64),
    pub model_seeds: Vec<u64>,
    pub per_model_roc_auc: Vec<f64>,
    pub per_model_pr_auc: Vec<f64>,
}

impl AblationResult {
    /// Median of the per-model ROC AUCs.
    pub fn median_roc_auc(&self) -> f64 {
        let mut v = self.per_model_roc_auc.clone();
        v.sort_by(f64::total_cmp);
        percentile(&v, 0.5)
    }
}

/// The channels `condition` zero-fills given the top-attention set.
pub fn ablated_channels(condition: AblationCondition, top: &[usize], channels: usize) -> Result<Vec<usize>> {
    let set = match condition {
        AblationCondition::Top70Dropped => top.to_vec(),
        AblationCondition::RemainingDropped => (0..channels).filter(|c| !top.contains(c)).collect(),
        AblationCondition::NoAttention | AblationCondition::NoneWithChannelAttention => return Ok(Vec::new()),
    };
    if set.is_empty() {
        return Err(Error::config(format!("ablation set for {} is empty", condition.label())));
    }
    Ok(set)
}

/// Evaluates the ensemble on held-out `trials` under one ablation
/// condition. ROC/PR AUCs of the averaged prediction carry percentile
/// bootstrap intervals; per-model AUCs give the across-seed distribution.
pub fn run_ablation(
    trials: &[Trial],
    models: &[ClassifierModel],
    condition: AblationCondition,
    top: &[usize],
    bootstrap_n: usize,
    bootstrap_seed: u64,
) -> Result<AblationResult> {
    let channels = models
        .first()
        .ok_or_else(|| Error::Contract("ablation needs at least one model".into()))?
        .channels();
    let dropped = ablated_channels(condition, top, channels)?;
    let opts = ForwardOptions {
        channel_attention: condition != AblationCondition::NoAttention,
    };
    let pred = if dropped.is_empty() {
        predict_ensemble(models, trials, &RawInput, opts)?
    } else {
        predict_ensemble(models, trials, &DroppedInput { channels: dropped.clone() }, opts)?
    };
    let labels = labels_of(trials);
    let per_model_roc_auc = pred
        .per_model
        .iter()
        .map(|p| roc_auc(p, &labels).map(|c| c.auc))
        .collect::<Result<Vec<_>>>()?;
    let per_model_pr_auc = pred
        .per_model
        .iter()
        .map(|p| pr_auc(p, &labels).map(|c| c.auc))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResult {
        condition,
        roc_auc: roc_auc(&pred.probs, &labels)?.auc,
        pr_auc: pr_auc(&pred.probs, &labels)?.auc,
        roc_auc_ci: bootstrap_ci(|s, y| Ok(roc_auc(s, y)?.auc), &pred.probs, &labels, bootstrap_n, 0.05, bootstrap_seed)?,
        pr_auc_ci: bootstrap_ci(|s, y| Ok(pr_auc(s, y)?.auc), &pred.probs, &labels, bootstrap_n, 0.05, bootstrap_seed)?,
        dropped,
        model_seeds: models.iter().map(|m| m.seed).collect(),
        per_model_roc_auc,
        per_model_pr_auc,
    })
}

/// Per-subtask scalar profile of one trial or subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskProfile {
    pub id: String,
    pub values: Vec<f64>,
}

/// Mean weight within each interval of `bounds`.
pub fn subtask_average(weights: &[f64], bounds: &[Interval]) -> Result<Vec<f64>> {
    validate_intervals(bounds, weights.len())?;
    Ok(bounds
        .iter()
        .map(|&(s, e)| weights[s..e].iter().sum::<f64>() / (e - s) as f64)
        .collect())
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Population standard deviation of `series` within each interval.
pub fn series_subtask_std(series: &[f64], bounds: &[Interval]) -> Result<Vec<f64>> {
    validate_intervals(bounds, series.len())?;
    Ok(bounds.iter().map(|&(s, e)| population_std(&series[s..e])).collect())
}

/// Mean over `channels` of a trial's signal, one value per timestep.
pub fn channel_average(trial: &Trial, channels: &[usize]) -> Result<Vec<f64>> {
    if channels.is_empty() {
        return Err(Error::config("channel selection is empty"));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= trial.channels()) {
        return Err(Error::shape(format!("channel {c} is outside 0..{}", trial.channels())));
    }
    Ok((0..trial.len())
        .map(|t| channels.iter().map(|&c| trial.channel(c)[t]).sum::<f64>() / channels.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskStdReport {
    /// One profile per subject, from that subject's first repetition.
    pub subjects: Vec<SubtaskProfile>,
    /// Median over subjects, per subtask.
    pub population_median: Vec<f64>,
    /// Subjects without a first-repetition trial.
    pub skipped: Vec<String>,
}

impl SubtaskStdReport {
    /// Subtask with the smallest population median.
    pub fn argmin(&self) -> Option<usize> {
        (0..self.population_median.len()).min_by(|&a, &b| self.population_median[a].total_cmp(&self.population_median[b]))
    }
}

/// Per-subject subtask variability of the signal averaged over
/// `top_channels`, computed on each subject's first repetition (repetition
/// 0) using the trial's own subtask bounds.
pub fn subtask_std(trials: &[Trial], top_channels: &[usize]) -> Result<SubtaskStdReport> {
    if top_channels.is_empty() {
        return Err(Error::config("subtask variability needs at least one channel"));
    }
    let mut by_subject: BTreeMap<&str, Option<&Trial>> = BTreeMap::new();
    for t in trials {
        let slot = by_subject.entry(t.subject_id.as_str()).or_insert(None);
        if t.repetition == 0 && slot.is_none() {
            *slot = Some(t);
        }
    }
    let mut subjects = Vec::new();
    let mut skipped = Vec::new();
    let mut count: Option<usize> = None;
    for (subject, trial) in by_subject {
        let Some(trial) = trial else {
            log::warn!("subject {subject} has no first-repetition trial; skipped");
            skipped.push(subject.to_string());
            continue;
        };
        let bounds = trial
            .subtask_bounds
            .as_deref()
            .ok_or_else(|| Error::Format(format!("trial {} has no subtask bounds", trial.trial_id)))?;
        if *count.get_or_insert(bounds.len()) != bounds.len() {
            return Err(Error::Format(format!(
                "trial {} has {} subtasks, expected {}",
                trial.trial_id,
                bounds.len(),
                count.unwrap_or(0)
            )));
        }
        let series = channel_average(trial, top_channels)?;
        subjects.push(SubtaskProfile {
            id: subject.to_string(),
            values: series_subtask_std(&series, bounds)?,
        });
    }
    if subjects.is_empty() {
        return Err(Error::InsufficientData("no subject has a first-repetition trial".into()));
    }
    let population_median = (0..count.unwrap_or(0))
        .map(|k| {
            let mut v: Vec<f64> = subjects.iter().map(|s| s.values[k]).collect();
            v.sort_by(f64::total_cmp);
            percentile(&v, 0.5)
        })
        .collect();
    Ok(SubtaskStdReport {
        subjects,
        population_median,
        skipped,
    })
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// One row per condition and model: `condition,model,seed,roc_auc,pr_auc`.
pub fn write_ablation_csv(path: impl AsRef<Path>, results: &[AblationResult]) -> Result<()> {
    let header = ["condition", "model", "seed", "roc_auc", "pr_auc"].map(String::from);
    let rows = results.iter().flat_map(|r| {
        (0..r.per_model_roc_auc.len()).map(move |m| {
            vec![
                r.condition.label().to_string(),
                m.to_string(),
                r.model_seeds[m].to_string(),
                r.per_model_roc_auc[m].to_string(),
                r.per_model_pr_auc[m].to_string(),
            ]
        })
    });
    write_csv(path.as_ref(), &header, rows)
}

/// One row per profile: `id,subtask_0,..,subtask_{k-1}`.
pub fn write_profiles_csv(path: impl AsRef<Path>, profiles: &[SubtaskProfile]) -> Result<()> {
    let k = profiles.iter().map(|p| p.values.len()).max().unwrap_or(0);
    let mut header = vec!["id".to_string()];
    header.extend((0..k).map(|i| format!("subtask_{i}")));
    let rows = profiles.iter().map(|p| {
        let mut r = vec![p.id.clone()];
        r.extend(p.values.iter().map(f64::to_string));
        r
    });
    write_csv(path.as_ref(), &header, rows)
}
