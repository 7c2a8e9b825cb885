use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_fan_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded source of initial weights. Biases start at zero.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `±uniform_fan_bound(fan_in, fan_out)`.
    pub fn fan_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = uniform_fan_bound(fan_in, fan_out);
        self.uniform(shape, bound)
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        Tensor::new(shape.to_vec(), data).expect("finite uniform samples")
    }

    /// Dense weight `fan_in × fan_out`.
    pub fn matrix<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.fan_uniform(&[fan_in, fan_out], fan_in, fan_out)
    }

    /// Conv filters `kh×kw×cin×cout`.
    pub fn filters<T: Real>(&mut self, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor<T> {
        self.fan_uniform(&[kh, kw, cin, cout], kh * kw * cin, kh * kw * cout)
    }

    pub fn zeros<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }
}
