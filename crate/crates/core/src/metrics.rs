//! Threshold metrics, ROC and precision-recall curves, bootstrap intervals.
//!
//! Labels are booleans with `true` for the positive (fail) class. A score at
//! or above the threshold predicts positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Trial;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn labels_of(trials: &[Trial]) -> Vec<bool> {
    trials.iter().map(|t| t.label.is_positive()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub mcc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Metrics whose denominator vanished; each is reported as 0.
    pub degenerate: Vec<String>,
}

pub fn threshold_metrics(c: &ConfusionCounts) -> ThresholdMetrics {
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let sensitivity = ratio("sensitivity", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let accuracy = ratio("accuracy", tp + tn, tp + tn + fp + fn_);
    let f1 = ratio("f1", 2.0 * tp, 2.0 * tp + fp + fn_);
    let mcc = ratio(
        "mcc",
        tp * tn - fp * fn_,
        ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt(),
    );
    ThresholdMetrics {
        mcc,
        f1,
        sensitivity,
        specificity,
        accuracy,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// ROC: `(fpr, tpr)`; PR: `(recall, precision)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Counts of (positives, negatives) predicted positive at each distinct
/// score, from the highest score down.
fn sweep(scores: &[f64], labels: &[bool]) -> (usize, usize, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = idx.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            steps.push((tp, fp));
        }
    }
    (pos, neg, steps)
}

/// ROC curve over distinct score thresholds and its trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Curve> {
    check_lengths(scores, labels)?;
    let (pos, neg, steps) = sweep(scores, labels);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateClass("ROC AUC needs both classes".into()));
    }
    // Twice the area in units of 1/(pos*neg), accumulated exactly.
    let mut points = vec![(0.0, 0.0)];
    let mut twice_area: u128 = 0;
    let (mut tp0, mut fp0) = (0usize, 0usize);
    for (tp, fp) in steps {
        twice_area += ((fp - fp0) * (tp + tp0)) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        (tp0, fp0) = (tp, fp);
    }
    let auc = twice_area as f64 / (2 * pos * neg) as f64;
    Ok(Curve { points, auc })
}

/// Precision-recall curve and average precision
/// `sum_k (R_k - R_{k-1}) P_k` over distinct thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<Curve> {
    check_lengths(scores, labels)?;
    let (pos, _, steps) = sweep(scores, labels);
    if pos == 0 {
        return Err(Error::DegenerateClass("PR AUC needs at least one positive".into()));
    }
    let mut points = Vec::with_capacity(steps.len());
    let (mut auc, mut prev_recall) = (0.0, 0.0);
    for (tp, fp) in steps {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(Curve { points, auc })
}

const BOOTSTRAP_RETRIES: usize = 100;

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of `metric` over `n` trial-level
/// resamples. Resamples containing a single class are redrawn.
pub fn bootstrap_ci(
    metric: impl Fn(&[f64], &[bool]) -> Result<f64>,
    scores: &[f64],
    labels: &[bool],
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    check_lengths(scores, labels)?;
    if n < 100 {
        return Err(Error::config(format!("bootstrap needs at least 100 resamples, got {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) || scores.is_empty() {
        return Err(Error::config("bootstrap alpha must lie in (0, 1) and data must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = scores.len();
    let (mut s, mut y) = (vec![0.0; m], vec![false; m]);
    let mut stats = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tries = 0;
        loop {
            for k in 0..m {
                let i = rng.gen_range(0..m);
                s[k] = scores[i];
                y[k] = labels[i];
            }
            let pos = y.iter().filter(|&&v| v).count();
            if pos > 0 && pos < m {
                break;
            }
            tries += 1;
            if tries >= BOOTSTRAP_RETRIES {
                return Err(Error::DegenerateClass(
                    "bootstrap kept drawing single-class resamples".into(),
                ));
            }
        }
        stats.push(metric(&s, &y)?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((percentile(&stats, alpha / 2.0), percentile(&stats, 1.0 - alpha / 2.0)))
}

/// Spread of per-model ROC AUCs within an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpread {
    pub per_model_roc_auc: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trials: usize,
    pub positives: usize,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub metrics: ThresholdMetrics,
    pub roc: Curve,
    pub pr: Curve,
    pub pr_method: String,
    pub roc_auc_ci: (f64, f64),
    pub pr_auc_ci: (f64, f64),
    pub ci_method: String,
    pub bootstrap_seed: u64,
    pub model_seeds: Vec<u64>,
    pub ensemble_spread: Option<EnsembleSpread>,
    /// Free-form protocol description (fold, shots, condition).
    pub protocol: serde_json::Value,
}

/// Full report for ensemble-mean `scores`. `per_model` adds the across-seed
/// AUC spread.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    per_model: Option<&[Vec<f64>]>,
    model_seeds: &[u64],
    bootstrap_n: usize,
    bootstrap_seed: u64,
) -> Result<EvalReport> {
    let c = confusion(scores, labels, DEFAULT_THRESHOLD)?;
    let roc = roc_auc(scores, labels)?;
    let pr = pr_auc(scores, labels)?;
    let roc_auc_ci = bootstrap_ci(|s, y| Ok(roc_auc(s, y)?.auc), scores, labels, bootstrap_n, 0.05, bootstrap_seed)?;
    let pr_auc_ci = bootstrap_ci(|s, y| Ok(pr_auc(s, y)?.auc), scores, labels, bootstrap_n, 0.05, bootstrap_seed)?;
    let ensemble_spread = match per_model {
        Some(models) => {
            let aucs = models
                .iter()
                .map(|m| roc_auc(m, labels).map(|c| c.auc))
                .collect::<Result<Vec<_>>>()?;
            Some(EnsembleSpread {
                min: aucs.iter().copied().fold(f64::INFINITY, f64::min),
                max: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                per_model_roc_auc: aucs,
            })
        }
        None => None,
    };
    Ok(EvalReport {
        n_trials: scores.len(),
        positives: labels.iter().filter(|&&y| y).count(),
        threshold: DEFAULT_THRESHOLD,
        confusion: c,
        metrics: threshold_metrics(&c),
        roc,
        pr,
        pr_method: "average_precision".into(),
        roc_auc_ci,
        pr_auc_ci,
        ci_method: "percentile_bootstrap_95".into(),
        bootstrap_seed,
        model_seeds: model_seeds.to_vec(),
        ensemble_spread,
        protocol: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// AP by brute force: for every distinct threshold count precision and
    /// recall from scratch.
    fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&y| y).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i]).count() as f64;
            let k = (0..scores.len()).filter(|&i| scores[i] >= t).count() as f64;
            ap += (tp / pos - prev_recall) * (tp / k);
            prev_recall = tp / pos;
        }
        ap
    }

    fn fixture(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
                return (s, y);
            }
        }
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert_eq!(confusion(&[0.5], &[false], 0.5).unwrap().fp, 1);
        assert_eq!(confusion(&[], &[], 0.5).unwrap(), ConfusionCounts::default());
        assert!(confusion(&[0.1], &[], 0.5).is_err());
    }

    #[test]
    fn perfect_and_chance_metrics() {
        let m = threshold_metrics(&ConfusionCounts { tp: 2, fp: 0, tn: 2, fn_: 0 });
        for v in [m.mcc, m.f1, m.sensitivity, m.specificity, m.accuracy, m.balanced_accuracy] {
            assert_eq!(v, 1.0);
        }
        let m = threshold_metrics(&ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(m.mcc, 0.0);
        assert_eq!(m.balanced_accuracy, 0.5);
    }

    #[test]
    fn hand_computed_metrics() {
        let m = threshold_metrics(&ConfusionCounts { tp: 9, fp: 3, tn: 7, fn_: 1 });
        let mcc = (9.0 * 7.0 - 3.0 * 1.0) / (12.0f64 * 10.0 * 10.0 * 8.0).sqrt();
        assert!((m.mcc - mcc).abs() < 1e-12);
        assert!((m.mcc - 0.6124).abs() < 1e-4);
        assert!((m.f1 - 18.0 / 22.0).abs() < 1e-12);
        assert!((m.sensitivity - 0.9).abs() < 1e-12);
        assert!((m.specificity - 0.7).abs() < 1e-12);
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        assert!((m.balanced_accuracy - 0.8).abs() < 1e-12);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn degenerate_denominators_are_flagged() {
        let m = threshold_metrics(&ConfusionCounts { tp: 3, fp: 0, tn: 0, fn_: 0 });
        assert_eq!(m.mcc, 0.0);
        assert!(m.degenerate.contains(&"mcc".to_string()));
        assert!(m.degenerate.contains(&"specificity".to_string()));
    }

    #[test]
    fn roc_examples() {
        let y = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &y).unwrap().auc, 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateClass(_))));
    }

    #[test]
    fn roc_matches_pair_count_on_small_fixtures() {
        for seed in 0..200 {
            let n = 2 + (seed as usize % 11);
            let (s, y) = fixture(seed, n);
            let auc = roc_auc(&s, &y).unwrap().auc;
            assert!((auc - pair_count_auc(&s, &y)).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn pr_examples() {
        let y = [true, true, false, false];
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap().auc, 1.0);
        let y = [true, false, false, false, false];
        let auc = pr_auc(&[0.1, 0.5, 0.6, 0.7, 0.8], &y).unwrap().auc;
        assert!((auc - 0.2).abs() < 1e-12);
        assert!(pr_auc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn pr_matches_brute_force() {
        for seed in 0..200 {
            let (s, y) = fixture(seed + 1000, 8);
            assert!((pr_auc(&s, &y).unwrap().auc - brute_ap(&s, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_metrics_match_brute_force() {
        for seed in 0..100 {
            let (s, y) = fixture(seed + 2000, 12);
            let c = confusion(&s, &y, 0.5).unwrap();
            let pred: Vec<bool> = s.iter().map(|&v| v >= 0.5).collect();
            let count = |p: bool, l: bool| (0..12).filter(|&i| pred[i] == p && y[i] == l).count() as f64;
            let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
            let m = threshold_metrics(&c);
            if tp + fn_ > 0.0 && tn + fp > 0.0 {
                assert!((m.balanced_accuracy - (tp / (tp + fn_) + tn / (tn + fp)) / 2.0).abs() < 1e-12);
            }
            assert!((m.accuracy - (tp + tn) / 12.0).abs() < 1e-12);
            let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
            if den > 0.0 {
                assert!((m.mcc - (tp * tn - fp * fn_) / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bootstrap_of_perfect_scores_is_a_point() {
        let s = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
        let y = [true, true, true, false, false, false];
        let ci = bootstrap_ci(|s, y| Ok(roc_auc(s, y)?.auc), &s, &y, 200, 0.05, 3).unwrap();
        assert_eq!(ci, (1.0, 1.0));
        let again = bootstrap_ci(|s, y| Ok(roc_auc(s, y)?.auc), &s, &y, 200, 0.05, 3).unwrap();
        assert_eq!(ci, again);
        assert!(bootstrap_ci(|_, _| Ok(0.0), &s, &y, 50, 0.05, 3).is_err());
    }

    #[test]
    fn bootstrap_accuracy_covers_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut covered = 0;
        for rep in 0..100 {
            let y: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
            let correct: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.7)).collect();
            let s: Vec<f64> = (0..200).map(|i| if correct[i] == y[i] { 1.0 } else { 0.0 }).collect();
            let acc = |s: &[f64], y: &[bool]| Ok(threshold_metrics(&confusion(s, y, 0.5)?).accuracy);
            let (lo, hi) = bootstrap_ci(acc, &s, &y, 200, 0.05, rep).unwrap();
            assert!(hi - lo >= 0.05 && hi - lo <= 0.20, "width {}", hi - lo);
            if lo <= 0.7 && 0.7 <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 90, "coverage {covered}");
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..500) {
            let (s, y) = fixture(seed, 10);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&s, &y).unwrap().auc, roc_auc(&t, &y).unwrap().auc);
            prop_assert_eq!(pr_auc(&s, &y).unwrap().auc, pr_auc(&t, &y).unwrap().auc);
        }

        #[test]
        fn label_swap_reflects_auc(seed in 0u64..500) {
            let (s, y) = fixture(seed, 10);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
            let a = roc_auc(&s, &y).unwrap().auc;
            let b = roc_auc(&neg, &flipped).unwrap().auc;
            prop_assert!((a - b).abs() < 1e-12);
            let swapped = roc_auc(&s, &flipped).unwrap().auc;
            prop_assert!((a + swapped - 1.0).abs() < 1e-12);
        }

        #[test]
        fn bounded_metrics(tp in 0usize..20, fp in 0usize..20, tn in 0usize..20, fn_ in 0usize..20) {
            let m = threshold_metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            prop_assert!((-1.0..=1.0).contains(&m.mcc));
            prop_assert!((0.0..=1.0).contains(&m.balanced_accuracy));
        }
    }
}
