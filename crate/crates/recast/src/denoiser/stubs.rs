//! Fixed-output noise models for verification: the exact-inversion and
//! reduction identities are checked against these rather than trained nets.

use crate::autodiff::Tensor;
use crate::denoiser::NoiseModel;
use crate::error::{Error, Result};

/// Predicts the same tensor for every (x, t).
pub struct ConstantModel {
    shape: Vec<usize>,
    value: Tensor,
}

impl ConstantModel {
    pub fn new(value: Tensor) -> Self {
        ConstantModel {
            shape: value.shape().to_vec(),
            value,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        ConstantModel {
            value: Tensor::zeros(&shape),
            shape,
        }
    }

    pub fn fill(shape: Vec<usize>, c: f64) -> Self {
        ConstantModel {
            value: Tensor::full(&shape, c),
            shape,
        }
    }
}

impl NoiseModel for ConstantModel {
    fn data_shape(&self) -> &[usize] {
        &self.shape
    }

    fn predict_noise(&self, x: &Tensor, _t: usize) -> Result<Tensor> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                detail: format!("input {:?} vs data shape {:?}", x.shape(), self.shape),
            });
        }
        Ok(self.value.detached())
    }
}

/// Counts prediction calls; wraps another model to measure traversal cost.
pub struct CountingModel<'a, M: NoiseModel> {
    inner: &'a M,
    calls: std::sync::atomic::AtomicUsize,
}

impl<'a, M: NoiseModel> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        CountingModel {
            inner,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<M: NoiseModel> NoiseModel for CountingModel<'_, M> {
    fn data_shape(&self) -> &[usize] {
        self.inner.data_shape()
    }

    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.predict_noise(x, t)
    }
}
