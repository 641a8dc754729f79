//! Seedable randomness. Every stochastic operation takes an explicit
//! [`Rng`] so runs replay exactly; the generator is ChaCha12, which is
//! stable across platforms and rust versions.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

pub struct Rng(ChaCha12Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha12Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from this one; used to give each
    /// subsystem its own reproducible source.
    pub fn fork(&mut self) -> Rng {
        Rng(ChaCha12Rng::seed_from_u64(self.0.gen()))
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen()
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.0.gen_range(lo..=hi)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape consistent by construction")
    }
}
