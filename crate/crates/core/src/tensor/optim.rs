use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for an ordered parameter list. Slot `i` belongs to
/// the `i`-th trainable tensor handed to [`OptimizerState::step`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of parameter slots the optimizer tracks.
    pub fn slots(&self) -> usize {
        self.first.len()
    }

    /// Applies one update to every tensor that requires grad, using its
    /// accumulated gradient (missing gradient = zero). Frozen tensors are
    /// skipped entirely and never occupy a slot.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let trainable: Vec<&mut &mut Tensor> =
            params.iter_mut().filter(|t| t.requires_grad()).collect();
        if self.first.is_empty() {
            self.first = trainable.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        if trainable.len() != self.first.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                trainable.len()
            )));
        }
        self.step += 1;
        for (i, t) in trainable.into_iter().enumerate() {
            if self.first[i].len() != t.numel() {
                return Err(Error::shape(format!(
                    "parameter {i} has {} values, optimizer slot has {}",
                    t.numel(),
                    self.first[i].len()
                )));
            }
            let grad = t.grad().map(<[f64]>::to_vec);
            let zeros;
            let g = match &grad {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; t.numel()];
                    &zeros
                }
            };
            update(
                t.values_mut(),
                g,
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}

/// Adam update of raw buffers with explicit gradients.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("parameter and gradient lists differ in length"));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::shape("optimizer state does not match parameter list"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::shape(format!("shape mismatch for parameter {i}")));
        }
    }
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update(p, g, &mut state.first[i], &mut state.second[i], state.step, &state.config);
    }
    Ok(())
}

fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for j in 0..p.len() {
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().trainable();
        let before = w.clone();
        let mut st = OptimizerState::new(AdamConfig::default());
        w.accumulate_grad(&[0.0; 3]).unwrap();
        st.step(&mut [&mut w]).unwrap();
        assert_eq!(w.values(), before.values());
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut w = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap().trainable();
        let mut st = OptimizerState::new(AdamConfig { lr: 0.0, ..Default::default() });
        w.accumulate_grad(&[3.0, -7.0]).unwrap();
        st.step(&mut [&mut w]).unwrap();
        assert_eq!(w.values(), &[0.5, -1.0]);
    }

    #[test]
    fn single_step_on_square_matches_hand_update() {
        // f(w) = w^2 at w = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4.
        let mut w = [1.0];
        let mut st = OptimizerState::new(AdamConfig::default());
        adam_step(&mut [&mut w], &[&[2.0]], &mut st).unwrap();
        let expected = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_tensors_take_no_slot() {
        let mut a = Tensor::ones(&[2]).trainable();
        let mut b = Tensor::ones(&[5]);
        let mut st = OptimizerState::new(AdamConfig::default());
        st.step(&mut [&mut a, &mut b]).unwrap();
        assert_eq!(st.slots(), 1);
    }

    #[test]
    fn mismatched_lists_are_shape_errors() {
        let mut st = OptimizerState::new(AdamConfig::default());
        let mut w = [1.0, 2.0];
        assert!(adam_step(&mut [&mut w], &[&[1.0]], &mut st).is_err());
    }
}
