//! Johnson SB (bounded) distribution: density, distribution function,
//! quantiles and maximum-likelihood fitting.
//!
//! `X` is SB(γ, δ, ξ, λ) when `γ + δ ln((X − ξ) / (ξ + λ − X))` is standard
//! normal; the support is `(ξ, ξ + λ)`.

use serde::{Deserialize, Serialize};

use super::normal::{normal_cdf, normal_quantile};
use crate::error::{Error, Result};

/// Smallest sample accepted by [`fit_johnson_sb`].
pub const MIN_FIT_SAMPLES: usize = 8;

/// Lower and upper tail probabilities of the normalization interval.
pub const BOUND_TAILS: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JohnsonSb {
    pub gamma: f64,
    pub delta: f64,
    pub xi: f64,
    pub lambda: f64,
}

impl JohnsonSb {
    pub fn new(gamma: f64, delta: f64, xi: f64, lambda: f64) -> Result<Self> {
        if !(delta > 0.0 && lambda > 0.0) || ![gamma, delta, xi, lambda].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "Johnson SB needs finite parameters with delta > 0 and lambda > 0, got \
                 ({gamma}, {delta}, {xi}, {lambda})"
            )));
        }
        Ok(JohnsonSb { gamma, delta, xi, lambda })
    }

    /// Normal score of `x`; infinite at or beyond the support bounds.
    pub fn z(&self, x: f64) -> f64 {
        let lo = x - self.xi;
        let hi = self.xi + self.lambda - x;
        if lo <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if hi <= 0.0 {
            return f64::INFINITY;
        }
        self.gamma + self.delta * (lo / hi).ln()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf(self.z(x))
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let lo = x - self.xi;
        let hi = self.xi + self.lambda - x;
        if lo <= 0.0 || hi <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let z = self.gamma + self.delta * (lo / hi).ln();
        self.delta.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + self.lambda.ln()
            - lo.ln()
            - hi.ln()
            - 0.5 * z * z
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&x| self.ln_pdf(x)).sum()
    }

    /// `Q(p) = ξ + λ / (1 + exp(−(z_p − γ) / δ))`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile probability must lie in (0, 1), got {p}")));
        }
        let z = normal_quantile(p);
        Ok(self.xi + self.lambda / (1.0 + (-(z - self.gamma) / self.delta).exp()))
    }

    /// Central 98% interval `(Q(0.01), Q(0.99))`.
    pub fn bounds(&self) -> (f64, f64) {
        derive_bounds(self)
    }
}

pub fn johnson_quantile(params: &JohnsonSb, p: f64) -> Result<f64> {
    params.quantile(p)
}

/// Normalization bounds from the central 98% interval.
pub fn derive_bounds(params: &JohnsonSb) -> (f64, f64) {
    let lo = params.quantile(BOUND_TAILS.0).expect("valid tail probability");
    let hi = params.quantile(BOUND_TAILS.1).expect("valid tail probability");
    (lo, hi)
}

/// Result of a fit, including the best log-likelihood seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbFit {
    pub params: JohnsonSb,
    pub log_likelihood: f64,
    pub evaluations: usize,
}

/// Profile log-likelihood for fixed support `(xi, xi + lambda)`. With the
/// support fixed, `y = ln((x − ξ)/(ξ + λ − x))` must be `N(−γ/δ, 1/δ²)`, so
/// `γ` and `δ` have closed forms.
fn profile(samples: &[f64], xi: f64, lambda: f64) -> Option<(JohnsonSb, f64)> {
    let n = samples.len() as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut log_jac = 0.0;
    for &x in samples {
        let lo = x - xi;
        let hi = xi + lambda - x;
        if lo <= 0.0 || hi <= 0.0 {
            return None;
        }
        let y = (lo / hi).ln();
        sum += y;
        sum_sq += y * y;
        log_jac += lambda.ln() - lo.ln() - hi.ln();
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    if var <= 0.0 {
        return None;
    }
    let delta = 1.0 / var.sqrt();
    let gamma = -mean * delta;
    let ll = n * delta.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * n + log_jac;
    Some((JohnsonSb { gamma, delta, xi, lambda }, ll))
}

/// Maximum-likelihood Johnson SB fit.
///
/// The support is searched by Nelder–Mead over the log-gaps between the
/// sample extremes and the support ends, starting from gaps of 5% of the
/// sample range; gaps are confined to `[1e-3, 1e2]` times the range. The
/// returned parameters are the best candidate probed.
pub fn fit_johnson_sb(samples: &[f64]) -> Result<SbFit> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "Johnson SB fit needs at least {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("samples must be finite".into()));
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return Err(Error::InsufficientData("samples have zero range".into()));
    }
    let (lo_gap, hi_gap) = ((1e-3 * range).ln(), (1e2 * range).ln());
    let support = |u: &[f64; 2]| {
        let below = u[0].clamp(lo_gap, hi_gap).exp();
        let above = u[1].clamp(lo_gap, hi_gap).exp();
        let xi = min - below;
        (xi, max + above - xi)
    };
    let mut best: Option<(JohnsonSb, f64)> = None;
    let mut evaluations = 0;
    let mut objective = |u: &[f64; 2]| -> f64 {
        evaluations += 1;
        let (xi, lambda) = support(u);
        match profile(samples, xi, lambda) {
            Some((p, ll)) => {
                if best.is_none_or(|(_, b)| ll > b) {
                    best = Some((p, ll));
                }
                -ll
            }
            None => f64::INFINITY,
        }
    };
    let start = (0.05 * range).ln();
    nelder_mead(&mut objective, [start, start], 1.0, 400, 1e-10);
    let (params, log_likelihood) =
        best.ok_or_else(|| Error::InsufficientData("no feasible Johnson SB support found".into()))?;
    Ok(SbFit {
        params,
        log_likelihood,
        evaluations,
    })
}

/// Minimizes `f` over two variables with the standard reflection /
/// expansion / contraction / shrink moves.
fn nelder_mead(f: &mut impl FnMut(&[f64; 2]) -> f64, x0: [f64; 2], step: f64, max_iter: usize, tol: f64) {
    let mut simplex = [x0, [x0[0] + step, x0[1]], [x0[0], x0[1] + step]];
    let mut values = simplex.map(|p| f(&p));
    let lerp = |a: &[f64; 2], b: &[f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    for _ in 0..max_iter {
        let mut order = [0, 1, 2];
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);
        if (values[2] - values[0]).abs() <= tol * (1.0 + values[0].abs()) {
            break;
        }
        let centroid = lerp(&simplex[0], &simplex[1], 0.5);
        let reflected = lerp(&simplex[2], &centroid, 2.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = lerp(&simplex[2], &centroid, 3.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let contracted = if fr < values[2] {
                lerp(&simplex[2], &centroid, 1.5)
            } else {
                lerp(&simplex[2], &centroid, 0.5)
            };
            let fc = f(&contracted);
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = lerp(&simplex[0], &simplex[i], 0.5);
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
}
