use std::collections::BTreeMap;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. Only the learning rate is exposed per call; the
/// moment coefficients stay at the conventional values.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, keyed like the parameters they track.
#[derive(Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_zeroed(&self) -> bool {
        self.step == 0
    }
}

/// One bias-corrected Adam update over named parameters.
///
/// Parameters without an entry in `grads` are treated as having zero
/// gradient. Moment buffers are created lazily on first use.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    state: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            None => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("gradient for unknown parameter '{}'", name),
                })
            }
            Some(p) if p.shape() != g.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "parameter '{}' {:?} vs gradient {:?}",
                        name,
                        p.shape(),
                        g.shape()
                    ),
                })
            }
            _ => {}
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);

    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let p = params.get(&name).unwrap();
        let shape = p.shape().to_vec();
        let pdata = p.data_arc();
        let n = pdata.len();
        let zero: Vec<f64>;
        let g = match grads.get(&name) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            next.push(pdata[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
        params.insert(name, Tensor::new(shape, next)?);
    }
    Ok(())
}
