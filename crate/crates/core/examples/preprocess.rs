//! Optical density, zero-phase band-pass and Johnson SB normalization of a
//! synthetic recording.

use fnirsfm::error::Result;
use fnirsfm::signal::{bandpass, od_convert, prepare, PreprocessConfig};
use fnirsfm::synth::{generate_trials, SynthConfig};

fn range(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn main() -> Result<()> {
    let (raw, _) = generate_trials(&SynthConfig::default())?;
    let trial = &raw[0];
    let od = od_convert(trial.channel(0))?;
    let filtered = bandpass(&od, trial.sample_rate_hz, 0.01, 0.5)?;
    println!("channel 0 intensity range {:?}", range(trial.channel(0)));
    println!("optical density range     {:?}", range(&od));
    println!("band-passed range         {:?}", range(&filtered));

    let (normalized, spec) = prepare(&raw, &PreprocessConfig::default(), |_| true)?;
    let c0 = spec.channels[0];
    println!(
        "channel 0 Johnson SB fit: gamma {:.3} delta {:.3} xi {:.4} lambda {:.4}; bounds [{:.4}, {:.4}]",
        c0.params.gamma, c0.params.delta, c0.params.xi, c0.params.lambda, c0.lo, c0.hi
    );
    println!("normalized range {:?}", range(normalized[0].channel(0)));
    Ok(())
}
