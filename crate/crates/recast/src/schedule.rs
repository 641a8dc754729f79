//! Noise schedules and accelerated timestep grids.
//!
//! Conventions: `beta[t]` is indexed 1..=T (stored at `t-1`), `alpha_bar[t]`
//! is the running product of `1 - beta[s]` for s in 1..=t with
//! `alpha_bar[0] = 1`, so a traversal can start exactly at timestep 0.

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Variance schedule: per-step beta and cumulative alpha-bar.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over T steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got ({}, {})",
                beta_start, beta_end
            )));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Schedule {
            t_max,
            beta_start,
            beta_end,
            beta,
            alpha_bar,
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_max {
            return Err(Error::IndexOutOfRange {
                what: "beta",
                index: t,
                max: self.t_max,
            });
        }
        Ok(self.beta[t - 1])
    }

    /// alpha_bar_t for t in 0..=T; alpha_bar_0 = 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::IndexOutOfRange {
            what: "alpha_bar",
            index: t,
            max: self.t_max,
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Strictly increasing timestep subsequence tau_1..tau_S with tau_1 = 0 and
/// tau_S = t0, used for accelerated forward/reverse traversals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepGrid {
    taus: Vec<usize>,
}

impl TimestepGrid {
    /// Evenly spaced grid over [0, t0], rounded to distinct integers with
    /// exact endpoints.
    pub fn new(t0: usize, s: usize) -> Result<Self> {
        if t0 < 1 {
            return Err(Error::InvalidRange("t0 must be at least 1".into()));
        }
        if s < 2 {
            return Err(Error::InvalidRange("grid length must be at least 2".into()));
        }
        if s > t0 + 1 {
            return Err(Error::InfeasibleGrid { s, max: t0 + 1 });
        }
        let mut taus: Vec<usize> = (0..s)
            .map(|i| ((i as f64) * (t0 as f64) / (s - 1) as f64).round() as usize)
            .collect();
        // rounding can collide; sweep forward then backward to restore strict
        // monotonicity while pinning both endpoints
        taus[0] = 0;
        taus[s - 1] = t0;
        for i in 1..s {
            if taus[i] <= taus[i - 1] {
                taus[i] = taus[i - 1] + 1;
            }
        }
        taus[s - 1] = t0;
        for i in (0..s - 1).rev() {
            if taus[i] >= taus[i + 1] {
                taus[i] = taus[i + 1] - 1;
            }
        }
        debug_assert!(taus.windows(2).all(|w| w[0] < w[1]));
        Ok(TimestepGrid { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t0(&self) -> usize {
        *self.taus.last().unwrap()
    }

    /// Consecutive hops walking up: (from, to) pairs with from < to.
    pub fn hops_up(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taus.windows(2).map(|w| (w[0], w[1]))
    }

    /// Consecutive hops walking down: (from, to) pairs with from > to.
    pub fn hops_down(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taus.windows(2).rev().map(|w| (w[1], w[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_half_beta() {
        let s = Schedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.beta(1).unwrap(), 0.5);
        assert_eq!(s.beta(2).unwrap(), 0.5);
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn single_step() {
        let s = Schedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn thousand_step_product_matches_left_fold() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        // independent running product
        let mut prod = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let got = s.alpha_bar(1000).unwrap();
        assert!(((got - prod) / prod).abs() < 1e-12);
        // and a mid value
        let mut prod500 = 1.0;
        for i in 0..500 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod500 *= 1.0 - beta;
        }
        assert!(((s.alpha_bar(500).unwrap() - prod500) / prod500).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_boundary_and_recurrence() {
        let s = Schedule::linear(64, 1e-3, 0.05).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=64 {
            let expect = s.alpha_bar(t - 1).unwrap() * (1.0 - s.beta(t).unwrap());
            assert_eq!(s.alpha_bar(t).unwrap(), expect);
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() > 0.0);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(Schedule::linear(10, 0.0, 0.5).is_err());
        assert!(Schedule::linear(10, 0.5, 0.2).is_err());
        assert!(Schedule::linear(10, 0.1, 1.0).is_err());
        assert!(Schedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn out_of_range_index() {
        let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(11).is_err());
        assert!(s.beta(0).is_err());
        assert!(s.beta(11).is_err());
    }

    #[test]
    fn grid_endpoints_only() {
        let g = TimestepGrid::new(500, 2).unwrap();
        assert_eq!(g.taus(), &[0, 500]);
    }

    #[test]
    fn grid_full() {
        let g = TimestepGrid::new(4, 5).unwrap();
        assert_eq!(g.taus(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn grid_even_spacing() {
        let g = TimestepGrid::new(500, 6).unwrap();
        assert_eq!(g.taus(), &[0, 100, 200, 300, 400, 500]);
    }

    #[test]
    fn grid_infeasible() {
        assert!(matches!(
            TimestepGrid::new(4, 6),
            Err(Error::InfeasibleGrid { s: 6, max: 5 })
        ));
    }

    #[test]
    fn grid_hops() {
        let g = TimestepGrid::new(10, 3).unwrap();
        let up: Vec<_> = g.hops_up().collect();
        assert_eq!(up, vec![(0, 5), (5, 10)]);
        let down: Vec<_> = g.hops_down().collect();
        assert_eq!(down, vec![(10, 5), (5, 0)]);
    }
}
