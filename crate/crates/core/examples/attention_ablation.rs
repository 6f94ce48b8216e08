//! Channel ablation: drops the channels holding 70% of channel attention,
//! drops the rest, or bypasses channel attention, and compares AUCs.
//!
//! Usage: cargo run --release --example attention_ablation

use fnirsfm::classifier::{train_supervised, ClassifierConfig, SupervisedConfig};
use fnirsfm::config::split_subjects;
use fnirsfm::encoder::EncoderConfig;
use fnirsfm::error::Result;
use fnirsfm::interpret::{
    aggregate_channel_attention, model_channel_weights, run_ablation, select_top_attention, AblationCondition,
};
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

    // The top set comes from the training subjects so held-out trials only
    // score the ablation.
    let per_model = models
        .iter()
        .map(|m| model_channel_weights(m, &train))
        .collect::<Result<Vec<_>>>()?;
    let top = select_top_attention(&aggregate_channel_attention(&per_model)?, 0.7)?;
    println!("top channels {top:?}, planted {:?}", truth.planted_channels);
    for cond in AblationCondition::ALL {
        let r = run_ablation(&test, &models, cond, &top, 500, 0)?;
        println!(
            "{:28} ROC AUC {:.3} [{:.3}, {:.3}]  per-seed median {:.3}  dropped {:?}",
            cond.label(),
            r.roc_auc,
            r.roc_auc_ci.0,
            r.roc_auc_ci.1,
            r.median_roc_auc(),
            r.dropped
        );
    }
    Ok(())
}
