//! Adapts a trained 16-channel model to a 12-channel montage with a small
//! input adapter, under the k-shot protocol.
//!
//! Usage: cargo run --release --example kshot_adaptation [-- <draws>]

use fnirsfm::adapter::{kshot_protocol, AdapterConfig, KshotConfig};
use fnirsfm::classifier::{train_one, ClassifierConfig, SupervisedConfig};
use fnirsfm::encoder::EncoderConfig;
use fnirsfm::error::Result;
use fnirsfm::pretrain::{pretrain_run, PretrainConfig};
use fnirsfm::signal::{prepare, preprocess, PreprocessConfig};
use fnirsfm::synth::{generate_trials, SynthConfig};

fn main() -> Result<()> {
    let draws: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let source = SynthConfig {
        effect_size: 1.5,
        t_min: 40,
        t_max: 56,
        ..Default::default()
    };
    let (raw, _) = generate_trials(&source)?;
    let (trials, _) = prepare(&raw, &PreprocessConfig::default(), |_| true)?;
    let pre = PretrainConfig {
        max_epochs: 20,
        plateau_patience: 20,
        ..Default::default()
    };
    let encoder = pretrain_run(&trials, EncoderConfig::default(), &pre, 0)?.encoder;
    let sup = SupervisedConfig {
        epochs: 80,
        ..Default::default()
    };
    let model = train_one(&trials, &encoder, &ClassifierConfig::default(), &sup, 0)?;

    let target = SynthConfig {
        n_subjects: 9,
        trials_per_subject: 9,
        positive_fraction: 2.0 / 3.0,
        seed: 7,
        ..source
    }
    .ood();
    let (raw_new, _) = generate_trials(&target)?;
    let filtered = raw_new
        .iter()
        .map(|t| preprocess(t, &PreprocessConfig::default()))
        .collect::<Result<Vec<_>>>()?;
    let kcfg = KshotConfig {
        draws,
        ..Default::default()
    };
    let acfg = AdapterConfig::default();
    for k in [10, 30] {
        let r = kshot_protocol(&filtered, std::slice::from_ref(&model), k, &kcfg, &acfg, 1)?;
        println!(
            "k={k:2}: {} evaluations, median ROC AUC {:.3}, median accuracy {:.3}",
            r.evaluations.len(),
            r.median_roc_auc,
            r.median_accuracy
        );
    }
    Ok(())
}
