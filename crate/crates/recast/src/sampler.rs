//! Forward and reverse diffusion traversals: the stochastic DDPM steps, the
//! generalized sigma-parameterized step, deterministic DDIM inversion and
//! generation over accelerated grids, and multi-model blended stepping.
//!
//! Grid semantics: inversion evaluates the model at the lower time of each
//! hop and generation at the upper time. That asymmetry is the entire source
//! of finite round-trip error, which shrinks as the grid gets denser. When a
//! hop starts at timestep 0 the noise prediction is taken at t=1 (the
//! clean-signal term still uses alpha_bar_0 = 1, so it degenerates to the
//! input exactly).

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::denoiser::{predict_x0_from, NoiseModel};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{Schedule, TimestepGrid};

/// Ordered (t, x_t) states of one traversal.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<(usize, Tensor)>,
}

impl Trajectory {
    pub fn last(&self) -> &Tensor {
        &self.states.last().expect("trajectory never empty").1
    }

    /// Timesteps must be strictly monotone in one direction.
    pub fn is_monotone(&self) -> bool {
        let ts: Vec<usize> = self.states.iter().map(|(t, _)| *t).collect();
        ts.windows(2).all(|w| w[0] < w[1]) || ts.windows(2).all(|w| w[0] > w[1])
    }
}

/// Reverse-step noise scale for the stochastic DDPM sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DdpmVariance {
    /// sigma_t^2 = beta_t
    #[default]
    Beta,
    /// sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t
    Posterior,
}

/// Closed-form forward draw: x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) w.
pub fn ddpm_forward_sample(x0: &Tensor, t: usize, s: &Schedule, rng: &mut Rng) -> Result<Tensor> {
    let w = rng.normal_tensor(x0.shape());
    ddpm_forward_with(x0, t, s, &w)
}

/// Forward jump with caller-supplied noise (the deterministic core).
pub fn ddpm_forward_with(x0: &Tensor, t: usize, s: &Schedule, w: &Tensor) -> Result<Tensor> {
    if t == 0 || t > s.t_max() {
        return Err(Error::IndexOutOfRange {
            what: "forward timestep",
            index: t,
            max: s.t_max(),
        });
    }
    let ab = s.alpha_bar(t)?;
    x0.mul_scalar(ab.sqrt())?
        .add(&w.mul_scalar((1.0 - ab).sqrt())?)
}

/// One stochastic reverse step from t to t-1. The added noise is omitted at
/// t = 1 so the final state is the posterior mean.
pub fn ddpm_reverse_step<M: NoiseModel + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    s: &Schedule,
    variance: DdpmVariance,
    rng: &mut Rng,
) -> Result<Tensor> {
    if t == 0 || t > s.t_max() {
        return Err(Error::IndexOutOfRange {
            what: "reverse timestep",
            index: t,
            max: s.t_max(),
        });
    }
    let beta = s.beta(t)?;
    let ab = s.alpha_bar(t)?;
    let eps = model.predict_noise(x_t, t)?;
    let mean = x_t
        .sub(&eps.mul_scalar(beta / (1.0 - ab).sqrt())?)?
        .mul_scalar(1.0 / (1.0 - beta).sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma_sq = match variance {
        DdpmVariance::Beta => beta,
        DdpmVariance::Posterior => (1.0 - s.alpha_bar(t - 1)?) / (1.0 - ab) * beta,
    };
    let z = rng.normal_tensor(x_t.shape());
    mean.add(&z.mul_scalar(sigma_sq.sqrt())?)
}

/// sqrt(a_bar_to) f + sqrt(1 - a_bar_to - sigma^2) eps; shared by every
/// deterministic path so reductions stay bit-identical.
fn assemble(f: &Tensor, eps: &Tensor, ab_to: f64, sigma_sq: f64) -> Result<Tensor> {
    f.mul_scalar(ab_to.sqrt())?
        .add(&eps.mul_scalar((1.0 - ab_to - sigma_sq).sqrt())?)
}

/// One deterministic hop between arbitrary grid times, in either direction.
/// The noise prediction is evaluated at max(t_from, 1); the clean-signal
/// term uses alpha_bar at t_from itself.
fn ddim_hop<M: NoiseModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t_from: usize,
    t_to: usize,
    s: &Schedule,
) -> Result<Tensor> {
    let eps = model.predict_noise(x, t_from.max(1))?;
    let f = predict_x0_from(x, &eps, t_from, s)?;
    assemble(&f, &eps, s.alpha_bar(t_to)?, 0.0)
}

/// Generalized reverse step with free noise scale sigma (Euler step of the
/// probability-flow ODE when sigma = 0).
pub fn generalized_step<M: NoiseModel + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    s: &Schedule,
    sigma: f64,
    rng: Option<&mut Rng>,
) -> Result<Tensor> {
    if t_to >= t_from || t_from > s.t_max() {
        return Err(Error::InvalidRange(format!(
            "generalized step wants 0 <= t_to < t_from <= T, got ({}, {})",
            t_from, t_to
        )));
    }
    let ab_to = s.alpha_bar(t_to)?;
    if sigma < 0.0 {
        return Err(Error::InvalidRange("sigma must be non-negative".into()));
    }
    if sigma * sigma > 1.0 - ab_to {
        return Err(Error::SigmaTooLarge {
            sigma,
            limit: 1.0 - ab_to,
        });
    }
    let eps = model.predict_noise(x_t, t_from)?;
    let f = predict_x0_from(x_t, &eps, t_from, s)?;
    let out = assemble(&f, &eps, ab_to, sigma * sigma)?;
    if sigma == 0.0 {
        return Ok(out);
    }
    let rng = rng.ok_or_else(|| {
        Error::InvalidRange("sigma > 0 requires an explicit generator".into())
    })?;
    let z = rng.normal_tensor(x_t.shape());
    out.add(&z.mul_scalar(sigma)?)
}

/// Deterministic forward DDIM over a grid: x0 up to the latent x_{t0}.
pub fn ddim_invert<M: NoiseModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    grid: &TimestepGrid,
    s: &Schedule,
) -> Result<Tensor> {
    let mut x = x0.clone();
    for (from, to) in grid.hops_up() {
        x = ddim_hop(model, &x, from, to, s)?;
    }
    Ok(x)
}

/// As [`ddim_invert`], recording every visited state.
pub fn ddim_invert_trajectory<M: NoiseModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    grid: &TimestepGrid,
    s: &Schedule,
) -> Result<Trajectory> {
    let mut states = vec![(0usize, x0.clone())];
    let mut x = x0.clone();
    for (from, to) in grid.hops_up() {
        x = ddim_hop(model, &x, from, to, s)?;
        states.push((to, x.clone()));
    }
    Ok(Trajectory { states })
}

/// Deterministic reverse DDIM over a grid: latent x_{t0} down to x0-hat.
pub fn ddim_generate<M: NoiseModel + ?Sized>(
    model: &M,
    latent: &Tensor,
    grid: &TimestepGrid,
    s: &Schedule,
) -> Result<Tensor> {
    let mut x = latent.clone();
    for (from, to) in grid.hops_down() {
        x = ddim_hop(model, &x, from, to, s)?;
    }
    Ok(x)
}

/// As [`ddim_generate`], recording every visited state.
pub fn ddim_generate_trajectory<M: NoiseModel + ?Sized>(
    model: &M,
    latent: &Tensor,
    grid: &TimestepGrid,
    s: &Schedule,
) -> Result<Trajectory> {
    let t0 = grid.t0();
    let mut states = vec![(t0, latent.clone())];
    let mut x = latent.clone();
    for (from, to) in grid.hops_down() {
        x = ddim_hop(model, &x, from, to, s)?;
        states.push((to, x.clone()));
    }
    Ok(Trajectory { states })
}

/// Per-model convex weights over the reverse grid, constant or tabulated
/// by timestep.
#[derive(Clone, Debug)]
pub struct CombinationWeights {
    m: usize,
    table: WeightTable,
}

#[derive(Clone, Debug)]
enum WeightTable {
    Constant(Vec<f64>),
    PerTime(BTreeMap<usize, Vec<f64>>),
}

pub const WEIGHT_SUM_TOL: f64 = 1e-9;

fn validate_weights(t: usize, w: &[f64]) -> Result<()> {
    for &g in w {
        if g < 0.0 {
            return Err(Error::NegativeWeight { value: g });
        }
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::WeightSum { t, sum });
    }
    Ok(())
}

impl CombinationWeights {
    /// The same weights at every grid time.
    pub fn constant(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidRange("need at least one weight".into()));
        }
        validate_weights(0, &w)?;
        Ok(CombinationWeights {
            m: w.len(),
            table: WeightTable::Constant(w),
        })
    }

    /// Explicit weights per grid timestep.
    pub fn per_time(map: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let m = match map.values().next() {
            None => return Err(Error::InvalidRange("empty weight table".into())),
            Some(w) => w.len(),
        };
        for (t, w) in &map {
            if w.len() != m {
                return Err(Error::InvalidRange(format!(
                    "weight row at t={} has {} entries, expected {}",
                    t,
                    w.len(),
                    m
                )));
            }
            validate_weights(*t, w)?;
        }
        Ok(CombinationWeights {
            m,
            table: WeightTable::PerTime(map),
        })
    }

    pub fn models(&self) -> usize {
        self.m
    }

    pub fn at(&self, t: usize) -> Result<&[f64]> {
        match &self.table {
            WeightTable::Constant(w) => Ok(w),
            WeightTable::PerTime(map) => map.get(&t).map(|w| w.as_slice()).ok_or_else(|| {
                Error::InvalidRange(format!("no combination weights defined at t={}", t))
            }),
        }
    }
}

/// Convex blend that skips zero-weight terms, so degenerate weightings
/// reduce bit-exactly to the surviving model.
fn blend(parts: &[Tensor], gammas: &[f64]) -> Result<Tensor> {
    let active: Vec<(usize, f64)> = gammas
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, g)| *g != 0.0)
        .collect();
    match active.as_slice() {
        [] => Ok(Tensor::zeros(parts[0].shape())),
        [(i, g)] if *g == 1.0 => Ok(parts[*i].clone()),
        _ => {
            let (i0, g0) = active[0];
            let mut acc = parts[i0].mul_scalar(g0)?;
            for &(i, g) in &active[1..] {
                acc = acc.add(&parts[i].mul_scalar(g)?)?;
            }
            Ok(acc)
        }
    }
}

/// One deterministic reverse hop mixing several models per Eq.-13-style
/// convex combination of their clean-signal and noise predictions.
pub fn combined_reverse_step(
    models: &[&dyn NoiseModel],
    weights: &CombinationWeights,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    s: &Schedule,
) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::InvalidRange("need at least one model".into()));
    }
    if models.len() != weights.models() {
        return Err(Error::InvalidRange(format!(
            "{} models but weights for {}",
            models.len(),
            weights.models()
        )));
    }
    if t_to >= t_from || t_from > s.t_max() {
        return Err(Error::InvalidRange(format!(
            "combined step wants t_to < t_from <= T, got ({}, {})",
            t_from, t_to
        )));
    }
    let gammas = weights.at(t_from)?;
    let mut epss = Vec::with_capacity(models.len());
    let mut fs = Vec::with_capacity(models.len());
    for m in models {
        let eps = m.predict_noise(x_t, t_from)?;
        fs.push(predict_x0_from(x_t, &eps, t_from, s)?);
        epss.push(eps);
    }
    let eps = blend(&epss, gammas)?;
    let f = blend(&fs, gammas)?;
    assemble(&f, &eps, s.alpha_bar(t_to)?, 0.0)
}

/// Full reverse traversal with blended models over a grid.
pub fn combined_generate(
    models: &[&dyn NoiseModel],
    weights: &CombinationWeights,
    latent: &Tensor,
    grid: &TimestepGrid,
    s: &Schedule,
) -> Result<Tensor> {
    let mut x = latent.clone();
    for (from, to) in grid.hops_down() {
        x = combined_reverse_step(models, weights, &x, from, to, s)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::stubs::ConstantModel;

    fn schedule() -> Schedule {
        Schedule::linear(100, 1e-3, 0.05).unwrap()
    }

    #[test]
    fn forward_with_zero_x0_scales_noise() {
        let s = schedule();
        let x0 = Tensor::zeros(&[3]);
        let w = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let xt = ddpm_forward_with(&x0, 40, &s, &w).unwrap();
        let c = (1.0 - s.alpha_bar(40).unwrap()).sqrt();
        for (got, want) in xt.data().iter().zip(w.data()) {
            assert_eq!(*got, c * want);
        }
    }

    #[test]
    fn forward_with_tiny_beta_is_near_identity() {
        let s = Schedule::linear(10, 1e-12, 1e-12).unwrap();
        let x0 = Tensor::from_vec(vec![1.0, 2.0]);
        let w = Tensor::from_vec(vec![5.0, -5.0]);
        let xt = ddpm_forward_with(&x0, 10, &s, &w).unwrap();
        for (got, want) in xt.data().iter().zip(x0.data()) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn reverse_step_with_zero_model_rescales() {
        let s = schedule();
        let model = ConstantModel::zeros(vec![2]);
        let x = Tensor::from_vec(vec![1.0, -1.0]);
        let mut rng = Rng::seed_from(0);
        // t = 1: no noise branch
        let out = ddpm_reverse_step(&model, &x, 1, &s, DdpmVariance::Beta, &mut rng).unwrap();
        let c = 1.0 / (1.0 - s.beta(1).unwrap()).sqrt();
        assert_eq!(out.data(), &[c, -c]);
    }

    #[test]
    fn generalized_step_sigma_zero_matches_hop() {
        let s = schedule();
        let model = ConstantModel::fill(vec![2], 0.3);
        let x = Tensor::from_vec(vec![0.4, -0.9]);
        let a = generalized_step(&model, &x, 50, 25, &s, 0.0, None).unwrap();
        let b = ddim_hop(&model, &x, 50, 25, &s).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn generalized_step_zero_model_scales() {
        let s = schedule();
        let model = ConstantModel::zeros(vec![2]);
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let out = generalized_step(&model, &x, 60, 20, &s, 0.0, None).unwrap();
        let scale =
            (s.alpha_bar(20).unwrap() / s.alpha_bar(60).unwrap()).sqrt();
        for (got, want) in out.data().iter().zip(x.data()) {
            assert!((got - want * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn generalized_step_to_zero_returns_prediction() {
        let s = schedule();
        let model = ConstantModel::fill(vec![2], 0.2);
        let x = Tensor::from_vec(vec![0.7, 0.1]);
        let out = generalized_step(&model, &x, 30, 0, &s, 0.0, None).unwrap();
        let f = model.predict_x0(&x, 30, &s).unwrap();
        // alpha_bar_0 = 1 so the eps coefficient vanishes
        for (got, want) in out.data().iter().zip(f.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn generalized_step_sigma_bound() {
        let s = schedule();
        let model = ConstantModel::zeros(vec![1]);
        let x = Tensor::from_vec(vec![1.0]);
        let limit = (1.0 - s.alpha_bar(10).unwrap()).sqrt();
        assert!(matches!(
            generalized_step(&model, &x, 30, 10, &s, limit * 1.01, None),
            Err(Error::SigmaTooLarge { .. })
        ));
    }

    #[test]
    fn invert_endpoint_grid_with_zero_model() {
        let s = schedule();
        let model = ConstantModel::zeros(vec![2]);
        let grid = TimestepGrid::new(80, 2).unwrap();
        let x0 = Tensor::from_vec(vec![1.0, -0.5]);
        let latent = ddim_invert(&model, &x0, &grid, &s).unwrap();
        let c = s.alpha_bar(80).unwrap().sqrt();
        for (got, want) in latent.data().iter().zip(x0.data()) {
            assert!((got - want * c).abs() < 1e-15);
        }
        // and generating back rescales exactly
        let back = ddim_generate(&model, &latent, &grid, &s).unwrap();
        for (got, want) in back.data().iter().zip(x0.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_is_bitwise_deterministic() {
        let s = schedule();
        let model = ConstantModel::fill(vec![3], 0.7);
        let grid = TimestepGrid::new(90, 7).unwrap();
        let x0 = Tensor::from_vec(vec![0.2, -0.4, 0.9]);
        let a = ddim_invert(&model, &x0, &grid, &s).unwrap();
        let b = ddim_invert(&model, &x0, &grid, &s).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn constant_model_round_trip_is_exact() {
        let s = schedule();
        let model = ConstantModel::fill(vec![2], -0.6);
        let grid = TimestepGrid::new(70, 5).unwrap();
        let x0 = Tensor::from_vec(vec![1.3, 0.25]);
        let latent = ddim_invert(&model, &x0, &grid, &s).unwrap();
        let back = ddim_generate(&model, &latent, &grid, &s).unwrap();
        for (got, want) in back.data().iter().zip(x0.data()) {
            assert!(((got - want) / want).abs() < 1e-10);
        }
    }

    #[test]
    fn trajectories_are_monotone() {
        let s = schedule();
        let model = ConstantModel::zeros(vec![1]);
        let grid = TimestepGrid::new(50, 4).unwrap();
        let x0 = Tensor::from_vec(vec![0.5]);
        let up = ddim_invert_trajectory(&model, &x0, &grid, &s).unwrap();
        assert!(up.is_monotone());
        assert_eq!(up.states.len(), 4);
        let down = ddim_generate_trajectory(&model, up.last(), &grid, &s).unwrap();
        assert!(down.is_monotone());
    }

    #[test]
    fn weights_must_be_convex() {
        assert!(CombinationWeights::constant(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            CombinationWeights::constant(vec![0.6, 0.6]),
            Err(Error::WeightSum { .. })
        ));
        assert!(matches!(
            CombinationWeights::constant(vec![1.5, -0.5]),
            Err(Error::NegativeWeight { .. })
        ));
    }

    #[test]
    fn single_model_combination_is_bitwise_reduction() {
        let s = schedule();
        let model = ConstantModel::fill(vec![2], 0.4);
        let x = Tensor::from_vec(vec![0.9, -0.2]);
        let w = CombinationWeights::constant(vec![1.0]).unwrap();
        let combined =
            combined_reverse_step(&[&model], &w, &x, 40, 20, &s).unwrap();
        let single = generalized_step(&model, &x, 40, 20, &s, 0.0, None).unwrap();
        assert!(combined.bitwise_eq(&single));
    }

    #[test]
    fn identical_models_any_weights_match_single() {
        let s = schedule();
        let m1 = ConstantModel::fill(vec![2], 0.8);
        let m2 = ConstantModel::fill(vec![2], 0.8);
        let x = Tensor::from_vec(vec![0.1, 0.6]);
        let w = CombinationWeights::constant(vec![0.5, 0.5]).unwrap();
        let combined = combined_reverse_step(&[&m1, &m2], &w, &x, 40, 20, &s).unwrap();
        let single = generalized_step(&m1, &x, 40, 20, &s, 0.0, None).unwrap();
        for (a, b) in combined.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn half_weights_average_constants() {
        let s = schedule();
        let m1 = ConstantModel::zeros(vec![1]);
        let m2 = ConstantModel::fill(vec![1], 1.0);
        let x = Tensor::from_vec(vec![0.5]);
        let w = CombinationWeights::constant(vec![0.5, 0.5]).unwrap();
        let out = combined_reverse_step(&[&m1, &m2], &w, &x, 40, 20, &s).unwrap();
        // blended eps is 0.5; assemble by hand
        let ab_from = s.alpha_bar(40).unwrap();
        let ab_to = s.alpha_bar(20).unwrap();
        let f1 = x.data()[0] / ab_from.sqrt();
        let f2 = (x.data()[0] - (1.0 - ab_from).sqrt()) / ab_from.sqrt();
        let f = 0.5 * f1 + 0.5 * f2;
        let want = ab_to.sqrt() * f + (1.0 - ab_to).sqrt() * 0.5;
        assert!((out.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn duplicating_a_model_and_splitting_weight_is_invariant() {
        let s = schedule();
        let m1 = ConstantModel::fill(vec![2], 0.3);
        let m2 = ConstantModel::fill(vec![2], -0.4);
        let x = Tensor::from_vec(vec![0.2, 0.9]);
        let w2 = CombinationWeights::constant(vec![0.6, 0.4]).unwrap();
        let a = combined_reverse_step(&[&m1, &m2], &w2, &x, 50, 10, &s).unwrap();
        let w3 = CombinationWeights::constant(vec![0.3, 0.3, 0.4]).unwrap();
        let b = combined_reverse_step(&[&m1, &m1, &m2], &w3, &x, 50, 10, &s).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn per_time_weights_lookup() {
        let map = BTreeMap::from([(50usize, vec![1.0, 0.0]), (25, vec![0.0, 1.0])]);
        let w = CombinationWeights::per_time(map).unwrap();
        assert_eq!(w.at(50).unwrap(), &[1.0, 0.0]);
        assert!(w.at(10).is_err());
    }
}
