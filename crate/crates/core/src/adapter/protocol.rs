use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_adapter, AdapterConfig};
use crate::classifier::{predict_ensemble, ClassifierModel, ForwardOptions};
use crate::error::{Error, Result};
use crate::metrics::{confusion, labels_of, percentile, roc_auc, threshold_metrics};
use crate::signal::{normalize, NormalizationSpec, Trial};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KshotConfig {
    pub shots: Vec<usize>,
    pub draws: usize,
    pub folds: usize,
    /// Probability threshold for the positive class.
    pub threshold: f64,
}

impl Default for KshotConfig {
    fn default() -> Self {
        KshotConfig {
            shots: vec![10, 20, 30],
            draws: 24,
            folds: 3,
            threshold: 0.5,
        }
    }
}

impl KshotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.draws == 0 || self.folds < 2 {
            return Err(Error::config("k-shot needs shot counts, at least one draw and two folds"));
        }
        if let Some(k) = self.shots.iter().find(|&&k| k == 0 || k % 2 != 0) {
            return Err(Error::config(format!("k-shot size {k} must be positive and even")));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("k-shot threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn class_indices(trials: &[Trial], pool: &[usize], positive: bool) -> Vec<usize> {
    pool.iter()
        .copied()
        .filter(|&i| trials[i].label.is_positive() == positive)
        .collect()
}

/// Class-balanced draw of `k` trial indices, `k / 2` per class, sorted.
pub fn draw_kshot(trials: &[Trial], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k == 0 || !k.is_multiple_of(2) {
        return Err(Error::config(format!("k-shot size {k} must be positive and even")));
    }
    let all: Vec<usize> = (0..trials.len()).collect();
    let mut pick = Vec::with_capacity(k);
    for positive in [false, true] {
        let mut idx = class_indices(trials, &all, positive);
        if idx.len() < k / 2 {
            return Err(Error::Protocol(format!(
                "{k}-shot draw needs {} trials per class, class {} has {}",
                k / 2,
                if positive { "fail" } else { "pass" },
                idx.len()
            )));
        }
        idx.shuffle(rng);
        pick.extend_from_slice(&idx[..k / 2]);
    }
    pick.sort_unstable();
    Ok(pick)
}

/// Splits `pool` into `folds` parts with each class dealt round-robin after
/// shuffling, so every fold receives both classes when possible.
pub fn stratified_folds(trials: &[Trial], pool: &[usize], folds: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); folds];
    for positive in [false, true] {
        let mut idx = class_indices(trials, pool, positive);
        idx.shuffle(rng);
        for (j, i) in idx.into_iter().enumerate() {
            out[j % folds].push(i);
        }
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KshotDraw {
    pub draw: usize,
    pub seed: u64,
    pub trial_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KshotEvaluation {
    pub draw: usize,
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub roc_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KshotReport {
    pub k: usize,
    pub draws: Vec<KshotDraw>,
    pub evaluations: Vec<KshotEvaluation>,
    pub median_roc_auc: f64,
    pub median_accuracy: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

fn normalized(trials: &[Trial], idx: &[usize], spec: &NormalizationSpec) -> Result<Vec<Trial>> {
    idx.iter().map(|&i| normalize(&trials[i], spec)).collect()
}

/// Runs the k-shot protocol for one `k`. `trials` are preprocessed but not
/// yet normalized; each draw fits its own normalization on the k training
/// trials, trains an adapter, and is evaluated on every fold of the
/// remaining pool.
pub fn kshot_protocol(
    trials: &[Trial],
    models: &[ClassifierModel],
    k: usize,
    config: &KshotConfig,
    adapter: &AdapterConfig,
    seed: u64,
) -> Result<KshotReport> {
    config.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    seeds.set_stream(k as u64);
    let members = adapter.members(models);
    let mut draws = Vec::with_capacity(config.draws);
    let mut evaluations = Vec::with_capacity(config.draws * config.folds);
    for d in 0..config.draws {
        let draw_seed = seeds.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        let pick = draw_kshot(trials, k, &mut rng)?;
        let pool: Vec<usize> = (0..trials.len()).filter(|i| pick.binary_search(i).is_err()).collect();
        for positive in [false, true] {
            if class_indices(trials, &pool, positive).len() < config.folds {
                return Err(Error::Protocol(format!(
                    "held-out pool after a {k}-shot draw has fewer than {} trials of one class",
                    config.folds
                )));
            }
        }
        let train_raw: Vec<Trial> = pick.iter().map(|&i| trials[i].clone()).collect();
        let spec = NormalizationSpec::fit(&train_raw)?;
        let train = normalized(trials, &pick, &spec)?;
        let fitted = train_adapter(&train, members, adapter, draw_seed)?;
        for (f, fold) in stratified_folds(trials, &pool, config.folds, &mut rng).iter().enumerate() {
            let test = normalized(trials, fold, &spec)?;
            let pred = predict_ensemble(members, &test, &fitted, ForwardOptions::default())?;
            let labels = labels_of(&test);
            let m = threshold_metrics(&confusion(&pred.probs, &labels, config.threshold)?);
            evaluations.push(KshotEvaluation {
                draw: d,
                fold: f,
                n_test: test.len(),
                accuracy: m.accuracy,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
                roc_auc: roc_auc(&pred.probs, &labels)?.auc,
            });
        }
        log::info!("{k}-shot draw {d}: done");
        draws.push(KshotDraw {
            draw: d,
            seed: draw_seed,
            trial_ids: pick.iter().map(|&i| trials[i].trial_id.clone()).collect(),
        });
    }
    Ok(KshotReport {
        k,
        median_roc_auc: median(evaluations.iter().map(|e| e.roc_auc).collect()),
        median_accuracy: median(evaluations.iter().map(|e| e.accuracy).collect()),
        draws,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoFold {
    pub subject: String,
    pub n_test: usize,
    pub accuracy: f64,
    /// Trial ids the fold's adapter was trained on.
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<LosoFold>,
    pub mean_accuracy: f64,
}

/// Leave-one-subject-out cross-validation of the adapter. `trials` are
/// preprocessed but not yet normalized; each fold fits normalization on
/// its training subjects only.
pub fn loso_cv(
    trials: &[Trial],
    models: &[ClassifierModel],
    adapter: &AdapterConfig,
    threshold: f64,
    seed: u64,
) -> Result<LosoReport> {
    let subjects: BTreeSet<&str> = trials.iter().map(|t| t.subject_id.as_str()).collect();
    if subjects.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-subject-out needs at least two subjects, found {}",
            subjects.len()
        )));
    }
    let members = adapter.members(models);
    let mut folds = Vec::with_capacity(subjects.len());
    for (s, subject) in subjects.iter().enumerate() {
        let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
            (0..trials.len()).partition(|&i| trials[i].subject_id == *subject);
        if train_idx.iter().any(|&i| trials[i].subject_id == *subject) {
            return Err(Error::Contract(format!("subject {subject} leaked into its own training fold")));
        }
        let train_raw: Vec<Trial> = train_idx.iter().map(|&i| trials[i].clone()).collect();
        let spec = NormalizationSpec::fit(&train_raw)?;
        let train = normalized(trials, &train_idx, &spec)?;
        let test = normalized(trials, &test_idx, &spec)?;
        let fitted = train_adapter(&train, members, adapter, seed.wrapping_add(s as u64))?;
        let pred = predict_ensemble(members, &test, &fitted, ForwardOptions::default())?;
        let m = threshold_metrics(&confusion(&pred.probs, &labels_of(&test), threshold)?);
        log::info!("LOSO subject {subject}: accuracy {:.3}", m.accuracy);
        folds.push(LosoFold {
            subject: subject.to_string(),
            n_test: test.len(),
            accuracy: m.accuracy,
            train_ids: train.iter().map(|t| t.trial_id.clone()).collect(),
            test_ids: test.iter().map(|t| t.trial_id.clone()).collect(),
        });
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(LosoReport { folds, mean_accuracy })
}
