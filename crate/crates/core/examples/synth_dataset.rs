//! Generates a synthetic dataset directory with planted channels, a planted
//! response window and a quiet subtask, then loads it back.
//!
//! Usage: cargo run --example synth_dataset [-- <out_dir>]

use fnirsfm::error::Result;
use fnirsfm::signal::load_dataset;
use fnirsfm::synth::{generate, ground_truth, SynthConfig};

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("synth_out"));
    let cfg = SynthConfig {
        t_min: 40,
        t_max: 56,
        ..Default::default()
    };
    generate(&cfg, &out)?;
    let truth = ground_truth(&out)?;
    let trials = load_dataset(&out)?;
    println!("{} trials, {} positive, {} channels", trials.len(), truth.positives(), truth.channels);
    println!("planted channels {:?}, window {:?}", truth.planted_channels, truth.planted_window);
    let first = &truth.trials[0];
    println!(
        "{} ({:?}): length {}, planted steps {:?}, subtasks {:?}",
        first.trial_id, first.label, first.len, first.window, first.subtask_bounds
    );
    Ok(())
}
