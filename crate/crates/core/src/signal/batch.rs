use super::dataset::Trial;
use crate::error::{Error, Result};

/// Zero-padded batch of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch x channels x max_len]`, padding holds exactly 0.
    pub signal: Vec<f64>,
    /// `[batch x max_len]`, true on valid timesteps.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub max_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn at(&self, b: usize, c: usize, t: usize) -> f64 {
        self.signal[(b * self.channels + c) * self.max_len + t]
    }

    /// Time-major layout `[batch*max_len x channels]` fed to the model.
    pub fn time_major(&self) -> Vec<f64> {
        let (c, t) = (self.channels, self.max_len);
        let mut out = vec![0.0; self.size() * t * c];
        for b in 0..self.size() {
            for ch in 0..c {
                for step in 0..t {
                    out[(b * t + step) * c + ch] = self.signal[(b * c + ch) * t + step];
                }
            }
        }
        out
    }

    /// Per-row averaging weights over valid steps, `[batch x max_len]`.
    pub fn mean_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.mask.len()];
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                w[b * self.max_len + t] = 1.0 / len as f64;
            }
        }
        w
    }

    /// Zero-fills the given channels in every trial.
    pub fn drop_channels(&mut self, channels: &[usize]) {
        for b in 0..self.size() {
            for &c in channels {
                let off = (b * self.channels + c) * self.max_len;
                self.signal[off..off + self.max_len].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Pads `trials` to the longest one with zeros.
pub fn pad_batch(trials: &[&Trial]) -> Result<Batch> {
    let channels = trials.first().map_or(0, |t| t.channels());
    if trials.iter().any(|t| t.channels() != channels) {
        return Err(Error::shape("all trials in a batch must share a channel count"));
    }
    let max_len = trials.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut signal = vec![0.0; trials.len() * channels * max_len];
    let mut mask = vec![false; trials.len() * max_len];
    for (b, t) in trials.iter().enumerate() {
        for c in 0..channels {
            let off = (b * channels + c) * max_len;
            signal[off..off + t.len()].copy_from_slice(t.channel(c));
        }
        mask[b * max_len..b * max_len + t.len()].iter_mut().for_each(|m| *m = true);
    }
    Ok(Batch {
        signal,
        mask,
        lengths: trials.iter().map(|t| t.len()).collect(),
        channels,
        max_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::dataset::Label;

    fn trial(len: usize, v: f64) -> Trial {
        Trial::new("t", "s", "k", Label::Pass, 0, vec![vec![v; len], vec![v + 1.0; len]]).unwrap()
    }

    #[test]
    fn equal_lengths_have_no_padding() {
        let (a, b) = (trial(4, 2.0), trial(4, 3.0));
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert!(batch.mask.iter().all(|&m| m));
    }

    #[test]
    fn shorter_trial_is_padded_with_zeros() {
        let (a, b) = (trial(5, 2.0), trial(3, 3.0));
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.max_len, 5);
        assert_eq!(&batch.mask[5..], &[true, true, true, false, false]);
        for c in 0..2 {
            assert_eq!(batch.at(1, c, 3), 0.0);
            assert_eq!(batch.at(1, c, 4), 0.0);
        }
        for (b, len) in [(0, 5), (1, 3)] {
            for c in 0..2 {
                for t in 0..5 {
                    let v = batch.at(b, c, t);
                    if t < len {
                        assert!((1.0..=11.0).contains(&v));
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
            assert_eq!(batch.mask[b * 5..b * 5 + 5].iter().filter(|&&m| m).count(), len);
        }
    }

    #[test]
    fn time_major_transposes() {
        let a = trial(2, 2.0);
        let batch = pad_batch(&[&a]).unwrap();
        assert_eq!(batch.time_major(), vec![2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn channel_mismatch() {
        let a = trial(2, 2.0);
        let b = Trial::new("t", "s", "k", Label::Pass, 0, vec![vec![1.0; 2]]).unwrap();
        assert!(matches!(pad_batch(&[&a, &b]), Err(Error::Shape(_))));
    }
}
