//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The op set is deliberately closed: exactly what the denoisers and losses
//! need. Ops evaluate eagerly; when any input is attached to a [`Graph`] the
//! result is recorded so a scalar loss at the end of a multi-step sampling
//! chain can be differentiated with respect to every leaf, including
//! parameters reused across timesteps (gradients accumulate per use).

mod check;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use check::{finite_diff, finite_diff_tensor, rel_error};
pub use graph::{Gradients, Graph};
pub use ops::group_norm;
pub use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_basic() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn swish_at_zero() {
        let x = t(&[1], &[0.0]);
        assert_eq!(x.swish().unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(&[3, 3], &[0.3, -1.2, 2.0, 0.5, 0.1, -0.7, 1.5, 0.9, -0.2]);
        assert!(eye.matmul(&a).unwrap().bitwise_eq(&a));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let g = Graph::new();
        let w = g.leaf(&t(&[3], &[0.5, -1.0, 2.0]));
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let loss = w.mul(&x).unwrap().sum().unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).data(), x.data());
    }

    #[test]
    fn quadratic_gradient() {
        let g = Graph::new();
        let w = g.leaf(&t(&[2], &[1.0, 2.0]));
        let loss = w.mul(&w).unwrap().sum().unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn two_step_chain_matches_finite_diff() {
        // y = sum(w * (w * x))
        let x = t(&[3], &[0.7, -0.3, 1.1]);
        let eval = |w: &Tensor| -> crate::error::Result<f64> {
            Ok(w.mul(&w.mul(&x)?)?.sum()?.item())
        };
        let w0 = t(&[3], &[0.4, 1.3, -0.8]);
        let fd = finite_diff_tensor(eval, &w0, 1e-6).unwrap();

        let g = Graph::new();
        let w = g.leaf(&w0);
        let loss = w.mul(&w.mul(&x).unwrap()).unwrap().sum().unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(rel_error(&grads.get(&w), &fd) < 1e-6);
    }

    #[test]
    fn shared_leaf_accumulates_both_uses() {
        // loss = sum(w*a) + sum(w*b) => grad = a + b
        let g = Graph::new();
        let w = g.leaf(&t(&[2], &[1.0, -1.0]));
        let a = t(&[2], &[2.0, 3.0]);
        let b = t(&[2], &[10.0, 20.0]);
        let loss = w
            .mul(&a)
            .unwrap()
            .sum()
            .unwrap()
            .add(&w.mul(&b).unwrap().sum().unwrap())
            .unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).data(), &[12.0, 23.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let g = Graph::new();
        let used = g.leaf(&t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(&t(&[2], &[5.0, 6.0]));
        let loss = used.sum().unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let w = g.leaf(&t(&[2], &[1.0, 2.0]));
        let y = w.mul_scalar(2.0).unwrap();
        assert!(matches!(
            g.backward(&y),
            Err(crate::error::Error::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn mixed_graphs_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.leaf(&t(&[1], &[1.0]));
        let b = g2.leaf(&t(&[1], &[2.0]));
        assert!(matches!(a.add(&b), Err(crate::error::Error::MixedGraphs)));
    }

    #[test]
    fn finite_diff_quadratic() {
        let mut params = std::collections::BTreeMap::new();
        params.insert("p".to_string(), Tensor::from_vec(vec![3.0]));
        let fd = finite_diff(|m| Ok(m["p"].item() * m["p"].item()), &params, 1e-4).unwrap();
        assert!((fd["p"].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_function() {
        let mut params = std::collections::BTreeMap::new();
        params.insert("p".to_string(), Tensor::from_vec(vec![1.0, -2.0]));
        let fd = finite_diff(|_| Ok(42.0), &params, 1e-4).unwrap();
        assert!(fd["p"].data().iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut params = std::collections::BTreeMap::new();
        params.insert("w".to_string(), t(&[3], &[1.0, 2.0, 3.0]));
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), t(&[3], &[0.5, -4.0, 0.001]));
        let mut state = AdamState::new();
        adam_step(&mut params, &mut state, &grads, 0.1).unwrap();
        // bias-corrected first step moves every coordinate by ~lr against the gradient sign
        let moved: Vec<f64> = params["w"]
            .data()
            .iter()
            .zip([1.0, 2.0, 3.0])
            .map(|(p, p0)| p - p0)
            .collect();
        for (d, g) in moved.iter().zip([0.5f64, -4.0, 0.001]) {
            assert!((d.abs() - 0.1).abs() < 1e-3, "step {} for grad {}", d, g);
            assert!(d.signum() == -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = std::collections::BTreeMap::new();
        params.insert("w".to_string(), t(&[2], &[1.0, 2.0]));
        let before = params["w"].clone();
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        let mut state = AdamState::new();
        adam_step(&mut params, &mut state, &grads, 0.1).unwrap();
        assert!(params["w"].bitwise_eq(&before));
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut params = std::collections::BTreeMap::new();
        params.insert("w".to_string(), t(&[2], &[1.0, 2.0]));
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[3]));
        let mut state = AdamState::new();
        assert!(adam_step(&mut params, &mut state, &grads, 0.1).is_err());
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(w) = ||w||^2 from (1,1); the norm shrinks steadily once moments warm up.
        let mut params = std::collections::BTreeMap::new();
        params.insert("w".to_string(), t(&[2], &[1.0, 1.0]));
        let mut state = AdamState::new();
        let mut norms = Vec::new();
        for _ in 0..200 {
            let w = &params["w"];
            let grads = std::collections::BTreeMap::from([(
                "w".to_string(),
                w.mul_scalar(2.0).unwrap(),
            )]);
            adam_step(&mut params, &mut state, &grads, 0.01).unwrap();
            let n = params["w"].data().iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
        }
        // frozen against a scalar reference run: strictly monotone at this
        // rate, ending at ~0.022
        assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(*norms.last().unwrap() < 0.05);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let g = Graph::new();
            let w = g.leaf(&t(&[4], &[0.1, -0.2, 0.3, -0.4]));
            let h = w.swish().unwrap().exp().unwrap();
            let loss = h.mul(&h).unwrap().mean().unwrap();
            let grads = g.backward(&loss).unwrap();
            grads.get(&w).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let x = t(&[4, 2], &[1.0, 3.0, -1.0, 5.0, 0.0, 2.0, 8.0, -4.0]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let y = group_norm(&x, &gamma, &beta, 2, 1e-12).unwrap();
        // each group of 2 channels x 2 cols has mean ~0, var ~1
        for grp in 0..2 {
            let vals = &y.data()[grp * 4..(grp + 1) * 4];
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
