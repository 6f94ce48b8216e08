//! Per-subtask signal variability on selected channels, summarized as a
//! population median across subjects.

use fnirsfm::error::Result;
use fnirsfm::interpret::subtask_std;
use fnirsfm::signal::{preprocess, PreprocessConfig};
use fnirsfm::synth::{generate_trials, SynthConfig};

fn main() -> Result<()> {
    let cfg = SynthConfig {
        n_subjects: 16,
        trials_per_subject: 2,
        positive_fraction: 1.0,
        ..Default::default()
    };
    let (raw, truth) = generate_trials(&cfg)?;
    let filtered = raw
        .iter()
        .map(|t| preprocess(t, &PreprocessConfig::default()))
        .collect::<Result<Vec<_>>>()?;
    let report = subtask_std(&filtered, &truth.planted_channels)?;
    for s in report.subjects.iter().take(4) {
        println!("{}: {:?}", s.id, s.values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
    println!(
        "population median {:?}",
        report.population_median.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );
    println!(
        "least variable subtask {:?} (quiet subtask in the generator: {})",
        report.argmin(),
        truth.low_variability_subtask
    );
    Ok(())
}
