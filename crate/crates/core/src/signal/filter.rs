//! Zero-phase Butterworth band-pass built from second-order sections.
//!
//! The band-pass is a 4th-order high-pass at `lo` cascaded with a 4th-order
//! low-pass at `hi`, each realized as two bilinear-transform biquads. It is
//! run forward and backward over a signal extended by odd reflection of 10%
//! of its length at each end, with every section started in its steady state
//! for the first sample so that constant offsets produce no start-up transient.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Shortest signal accepted by [`bandpass`].
pub const MIN_FILTER_LEN: usize = 16;

pub const DEFAULT_LO_HZ: f64 = 0.01;
pub const DEFAULT_HI_HZ: f64 = 0.5;

/// Quality factors of the two pole pairs of a 4th-order Butterworth prototype.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn design(fc: f64, fs: f64, q: f64, highpass: bool) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = if highpass {
            let k = (1.0 + cos) / 2.0;
            [k, -2.0 * k, k]
        } else {
            let k = (1.0 - cos) / 2.0;
            [k, 2.0 * k, k]
        };
        Biquad {
            b: b.map(|v| v / a0),
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II over `x` in place, starting from the steady
    /// state reached under a constant input equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&u) = x.first() else { return };
        let y_ss = self.dc_gain() * u;
        let mut s2 = self.b[2] * u - self.a[1] * y_ss;
        let mut s1 = self.b[1] * u - self.a[0] * y_ss + s2;
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b[0] * xin + s1;
            s1 = self.b[1] * xin - self.a[0] * y + s2;
            s2 = self.b[2] * xin - self.a[1] * y;
            *v = y;
        }
    }
}

/// Section cascade for the band `[lo, hi]` Hz at sample rate `fs`.
pub fn design_bandpass(fs: f64, lo: f64, hi: f64) -> Result<Vec<Biquad>> {
    if !(fs > 0.0 && lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::config(format!(
            "band-pass needs 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={fs}"
        )));
    }
    let mut sections: Vec<Biquad> = BUTTER4_Q.iter().map(|&q| Biquad::design(lo, fs, q, true)).collect();
    sections.extend(BUTTER4_Q.iter().map(|&q| Biquad::design(hi, fs, q, false)));
    Ok(sections)
}

/// Zero-phase band-pass of `x`.
pub fn bandpass(x: &[f64], fs: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let sections = design_bandpass(fs, lo, hi)?;
    if x.len() < MIN_FILTER_LEN {
        return Err(Error::Length {
            len: x.len(),
            min: MIN_FILTER_LEN,
        });
    }
    let n = x.len();
    let pad = (n / 10).max(1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    for _ in 0..2 {
        for s in &sections {
            s.run(&mut ext);
        }
        ext.reverse();
    }
    Ok(ext[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 5.08625;

    /// Amplitude of the `f` Hz component of `x` by projection on sin/cos.
    fn amplitude_at(x: &[f64], f: f64) -> f64 {
        let (mut c, mut s) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * f * t as f64 / FS;
            c += v * ph.cos();
            s += v * ph.sin();
        }
        2.0 * (c * c + s * s).sqrt() / x.len() as f64
    }

    #[test]
    fn zeros_stay_zero() {
        let y = bandpass(&[0.0; 64], FS, DEFAULT_LO_HZ, DEFAULT_HI_HZ).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn passband_sine_keeps_unit_gain() {
        let n = 4096;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * 0.1 * t as f64 / FS).sin()).collect();
        let y = bandpass(&x, FS, DEFAULT_LO_HZ, DEFAULT_HI_HZ).unwrap();
        let (a, b) = (n / 10, n - n / 10);
        let gain = amplitude_at(&y[a..b], 0.1) / amplitude_at(&x[a..b], 0.1);
        assert!((0.9..=1.1).contains(&gain), "gain {gain}");
    }

    #[test]
    fn constant_input_is_removed() {
        let n = 4096;
        let y = bandpass(&vec![2.0; n], FS, DEFAULT_LO_HZ, DEFAULT_HI_HZ).unwrap();
        let core = &y[n / 10..n - n / 10];
        let rms = (core.iter().map(|v| v * v).sum::<f64>() / core.len() as f64).sqrt();
        assert!(rms < 0.05 * 2.0, "rms {rms}");
    }

    #[test]
    fn stopband_is_attenuated() {
        let n = 4096;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * 1.5 * t as f64 / FS).sin()).collect();
        let y = bandpass(&x, FS, DEFAULT_LO_HZ, DEFAULT_HI_HZ).unwrap();
        assert!(amplitude_at(&y[400..3600], 1.5) < 0.01);
    }

    #[test]
    fn invalid_configuration() {
        let x = [1.0; 64];
        assert!(matches!(bandpass(&x, FS, 0.5, 0.1), Err(Error::Config(_))));
        assert!(matches!(bandpass(&x, FS, 0.0, 0.5), Err(Error::Config(_))));
        assert!(matches!(bandpass(&x, FS, 0.1, 3.0), Err(Error::Config(_))));
        assert!(matches!(bandpass(&x[..5], FS, 0.01, 0.5), Err(Error::Length { .. })));
    }
}
