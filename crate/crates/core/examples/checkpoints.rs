//! Saves and reloads an encoder checkpoint, and shows the typed error when
//! a checkpoint is loaded as the wrong kind.

use fnirsfm::checkpoint::{AdapterState, Checkpoint, EncoderState};
use fnirsfm::encoder::{Encoder, EncoderConfig};
use fnirsfm::error::Result;
use fnirsfm::pretrain::ReconstructionHead;
use fnirsfm::signal::{prepare, PreprocessConfig};
use fnirsfm::synth::{generate_trials, SynthConfig};
use fnirsfm::tensor::Initializer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (raw, _) = generate_trials(&SynthConfig {
        n_subjects: 2,
        t_min: 40,
        t_max: 56,
        ..Default::default()
    })?;
    let (_, spec) = prepare(&raw, &PreprocessConfig::default(), |_| true)?;
    let cfg = EncoderConfig::default();
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(3));
    let encoder = Encoder::with_initializer(cfg, &mut init)?;
    let head = ReconstructionHead::new(cfg.d_model, cfg.input_channels, &mut init);
    let state = EncoderState {
        encoder,
        head,
        normalization: spec,
        seed: 3,
    };

    let dir = std::env::temp_dir().join("fnirsfm_checkpoints");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("encoder.fnfm");
    state.save(&path)?;
    let bytes = std::fs::read(&path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    println!(
        "{} bytes, components {:?}, {} tensors, seed {}",
        bytes.len(),
        ck.components,
        ck.tensors.len(),
        ck.seed
    );
    let again = dir.join("encoder_again.fnfm");
    EncoderState::load(&path)?.save(&again)?;
    println!("reloaded and re-saved bytes identical: {}", std::fs::read(&again)? == bytes);
    match AdapterState::load(&path) {
        Ok(_) => println!("unexpectedly loaded an encoder as an adapter"),
        Err(e) => println!("loading it as an adapter fails: {e}"),
    }
    Ok(())
}
