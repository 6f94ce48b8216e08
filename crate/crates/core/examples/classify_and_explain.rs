//! Trains a small classifier ensemble over pretrained encoders, evaluates it
//! on held-out subjects and reads out channel and temporal attention.
//!
//! Usage: cargo run --release --example classify_and_explain

use fnirsfm::classifier::{predict_ensemble, train_supervised, ClassifierConfig, ForwardOptions, RawInput, SupervisedConfig};
use fnirsfm::config::split_subjects;
use fnirsfm::encoder::EncoderConfig;
use fnirsfm::error::Result;
use fnirsfm::interpret::{aggregate_channel_attention, model_channel_weights, select_top_attention};
use fnirsfm::metrics::{evaluate, labels_of};
use fnirsfm::pretrain::{pretrain_run, PretrainConfig};
use fnirsfm::signal::{prepare, PreprocessConfig, Trial};
use fnirsfm::synth::{generate_trials, SynthConfig};

fn main() -> Result<()> {
    let synth = SynthConfig {
        effect_size: 1.5,
        t_min: 40,
        t_max: 56,
        ..Default::default()
    };
    let (raw, truth) = generate_trials(&synth)?;
    let (train_subjects, _) = split_subjects(&raw, 0.25)?;
    let (all, _) = prepare(&raw, &PreprocessConfig::default(), |t| train_subjects.contains(&t.subject_id))?;
    let (train, test): (Vec<Trial>, Vec<Trial>) = all.into_iter().partition(|t| train_subjects.contains(&t.subject_id));

    let seeds = [0u64, 1, 2];
    let pre = PretrainConfig {
        max_epochs: 20,
        plateau_patience: 20,
        n_seeds: seeds.len(),
        seeds: seeds.to_vec(),
        ..Default::default()
    };
    let encoders = seeds
        .iter()
        .map(|&s| pretrain_run(&train, EncoderConfig::default(), &pre, s).map(|r| r.encoder))
        .collect::<Result<Vec<_>>>()?;
    let sup = SupervisedConfig {
        epochs: 60,
        ..Default::default()
    };
    let models = train_supervised(&train, &encoders, &ClassifierConfig::default(), &sup, &seeds)?;

    let pred = predict_ensemble(&models, &test, &RawInput, ForwardOptions::default())?;
    let report = evaluate(&pred.probs, &labels_of(&test), Some(&pred.per_model), &seeds, 1000, 0)?;
    println!(
        "held-out ROC AUC {:.3} [{:.3}, {:.3}], PR AUC {:.3}, MCC {:.3}",
        report.roc.auc, report.roc_auc_ci.0, report.roc_auc_ci.1, report.pr.auc, report.metrics.mcc
    );

    let per_model = models
        .iter()
        .map(|m| model_channel_weights(m, &test))
        .collect::<Result<Vec<_>>>()?;
    let weights = aggregate_channel_attention(&per_model)?;
    let top = select_top_attention(&weights, 0.7)?;
    println!("channels carrying 70% of attention {top:?} (planted {:?})", truth.planted_channels);

    if let Some((i, maps)) = pred.maps.iter().enumerate().find(|(i, _)| test[*i].label.is_positive()) {
        let peak = maps
            .temporal_weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(t, _)| t)
            .unwrap_or(0);
        let window = truth
            .trials
            .iter()
            .find(|t| t.trial_id == test[i].trial_id)
            .map(|t| t.window);
        println!("{}: temporal attention peaks at step {peak}, planted window {window:?}", maps.trial_id);
    }
    Ok(())
}
