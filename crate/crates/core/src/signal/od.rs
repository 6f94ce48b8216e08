use crate::error::{Error, Result};

/// Optical density relative to the channel mean: `-ln(I(t) / mean(I))`.
pub fn od_convert(intensity: &[f64]) -> Result<Vec<f64>> {
    if intensity.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(i) = intensity.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "intensity must be positive and finite, got {} at index {i}",
            intensity[i]
        )));
    }
    let mean = intensity.iter().sum::<f64>() / intensity.len() as f64;
    Ok(intensity.iter().map(|&v| -(v / mean).ln()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_intensity_is_zero() {
        assert!(od_convert(&[3.5; 10]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_invariant() {
        let i = [1.0, 2.5, 0.7, 4.0];
        let a = od_convert(&i).unwrap();
        let b = od_convert(&i.map(|v| 2.0 * v)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_ramp_matches_formula() {
        let k = 3.0;
        let e = std::f64::consts::E;
        let i = [k, k * e, k * e * e];
        let mean = (k + k * e + k * e * e) / 3.0;
        let out = od_convert(&i).unwrap();
        for (o, v) in out.iter().zip(i) {
            assert!((o - -(v / mean).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_is_domain_error() {
        assert!(matches!(od_convert(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(od_convert(&[1.0, -2.0]), Err(Error::Domain(_))));
    }
}
