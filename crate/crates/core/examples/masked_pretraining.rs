//! Masked-segment reconstruction pretraining of the encoder on synthetic
//! recordings, with the loss curve and a saved checkpoint.
//!
//! Usage: cargo run --release --example masked_pretraining [-- <epochs>]

use fnirsfm::checkpoint::EncoderState;
use fnirsfm::encoder::EncoderConfig;
use fnirsfm::error::Result;
use fnirsfm::pretrain::{evaluate_reconstruction, moving_average, pretrain_run, PretrainConfig};
use fnirsfm::signal::{prepare, PreprocessConfig};
use fnirsfm::synth::{generate_trials, SynthConfig};

fn main() -> Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let synth = SynthConfig {
        t_min: 40,
        t_max: 56,
        ..Default::default()
    };
    let (raw, _) = generate_trials(&synth)?;
    let (trials, spec) = prepare(&raw, &PreprocessConfig::default(), |_| true)?;
    let mut cfg = PretrainConfig {
        max_epochs: epochs,
        plateau_patience: epochs,
        batch_size: 1,
        ..Default::default()
    };
    cfg.adam.lr = 5e-4;
    let run = pretrain_run(&trials, EncoderConfig::default(), &cfg, 0)?;
    for (e, loss) in run.history.iter().enumerate().step_by(5) {
        println!("epoch {:4}  masked MSE {loss:.4}", e + 1);
    }
    if let Some(last) = moving_average(&run.history, 10).last() {
        println!("10-epoch moving average at the end {last:.4}");
    }
    let eval = evaluate_reconstruction(&run.encoder, &run.head, &trials, &cfg, 5, 1)?;
    println!("eval-mode masked MSE over 5 fresh masks {eval:.4}");
    let state = EncoderState {
        encoder: run.encoder,
        head: run.head,
        normalization: spec,
        seed: 0,
    };
    let path = std::env::temp_dir().join("encoder_seed0.fnfm");
    state.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
