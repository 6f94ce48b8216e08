use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Samples `N(0, std^2)` truncated at two standard deviations (rejection).
pub fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values = Vec::with_capacity(n);
    while values.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            values.push(z * std);
        }
    }
    Tensor::new(shape.to_vec(), values).expect("finite samples")
}

/// Seeded parameter initializer: truncated normal projections, zero biases,
/// unit layer-norm gains.
pub struct Initializer {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Initializer { rng, std: 0.02 }
    }

    pub fn weight(&mut self, shape: &[usize]) -> Tensor {
        truncated_normal(&mut self.rng, shape, self.std).trainable()
    }

    pub fn weight_std(&mut self, shape: &[usize], std: f64) -> Tensor {
        truncated_normal(&mut self.rng, shape, std).trainable()
    }

    pub fn bias(&mut self, len: usize) -> Tensor {
        Tensor::zeros(&[len]).trainable()
    }

    pub fn gain(&mut self, len: usize) -> Tensor {
        Tensor::ones(&[len]).trainable()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}
