//! Central-difference gradient estimation, the independent oracle used to
//! verify every reverse-mode rule.

use std::collections::BTreeMap;

use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Central differences of a scalar function over named parameters:
/// (f(p+eps) - f(p-eps)) / (2 eps), one coordinate at a time.
pub fn finite_diff<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut out = BTreeMap::new();
    let mut work = params.clone();
    for (name, p) in params {
        let mut grad = Vec::with_capacity(p.numel());
        for i in 0..p.numel() {
            let base = p.data().to_vec();

            let mut plus = base.clone();
            plus[i] += eps;
            work.insert(name.clone(), Tensor::new(p.shape().to_vec(), plus)?);
            let fp = f(&work)?;

            let mut minus = base;
            minus[i] -= eps;
            work.insert(name.clone(), Tensor::new(p.shape().to_vec(), minus)?);
            let fm = f(&work)?;

            grad.push((fp - fm) / (2.0 * eps));
        }
        work.insert(name.clone(), p.clone());
        out.insert(name.clone(), Tensor::new(p.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Central differences of a scalar function of a single tensor.
pub fn finite_diff_tensor<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;

        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;

        grad.push((fp - fm) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative L2 error ||a-b|| / max(||a||, ||b||), absolute when both vanish.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = norm(a).max(norm(b));
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}
