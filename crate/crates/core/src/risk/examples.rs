//! Grid optima for the one-dimensional threshold examples: treat units with
//! `X < c`, reward `alpha(c) 1[X < c] + eps`.

use crate::error::{OplError, Result};

type Curve = Box<dyn Fn(f64) -> f64 + Send + Sync>;

pub struct ClosedFormExample {
    /// Net benefit of treatment as a function of the threshold.
    pub alpha: Curve,
    /// Distribution function of `X`.
    pub cdf: Curve,
    pub noise_variance: f64,
    pub grid: Vec<f64>,
}

impl ClosedFormExample {
    pub fn new(
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        cdf: impl Fn(f64) -> f64 + Send + Sync + 'static,
        noise_variance: f64,
        grid: Vec<f64>,
    ) -> Self {
        Self {
            alpha: Box::new(alpha),
            cdf: Box::new(cdf),
            noise_variance,
            grid,
        }
    }

    /// Expected reward `alpha(c) F(c)`.
    pub fn mean_reward(&self, c: f64) -> f64 {
        (self.alpha)(c) * (self.cdf)(c)
    }

    /// `alpha(c)^2 F(c)(1 - F(c)) + noise variance`.
    pub fn reward_variance(&self, c: f64) -> f64 {
        let a = (self.alpha)(c);
        let f = (self.cdf)(c);
        a * a * f * (1.0 - f) + self.noise_variance
    }

    fn check(&self) -> Result<Vec<f64>> {
        if self.grid.is_empty() {
            return Err(OplError::InvalidInput("empty threshold grid".into()));
        }
        let f: Vec<f64> = self.grid.iter().map(|&c| (self.cdf)(c)).collect();
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(OplError::Domain("distribution function leaves [0, 1] on the grid".into()));
        }
        let ascending = self.grid.windows(2).all(|w| w[0] <= w[1]);
        if ascending && f.windows(2).any(|w| w[1] < w[0]) {
            return Err(OplError::Domain("distribution function decreases on the grid".into()));
        }
        Ok(f)
    }
}

fn grid_argmax(grid: &[f64], values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut best = (grid[0], f64::NEG_INFINITY);
    for (&c, v) in grid.iter().zip(values) {
        if v > best.1 || (v == best.1 && c < best.0) {
            best = (c, v);
        }
    }
    best
}

/// Grid maximiser of `alpha(c) F(c)`; ties go to the smallest `c`.
pub fn example1_optimum(ex: &ClosedFormExample) -> Result<(f64, f64)> {
    ex.check()?;
    Ok(grid_argmax(&ex.grid, ex.grid.iter().map(|&c| ex.mean_reward(c))))
}

/// Grid maximiser of the mean-to-variance ratio
/// `alpha F / (alpha^2 F (1 - F) + noise variance)`.
pub fn example2_optimum(ex: &ClosedFormExample) -> Result<(f64, f64)> {
    ex.check()?;
    let mut gammas = Vec::with_capacity(ex.grid.len());
    for &c in &ex.grid {
        let denom = ex.reward_variance(c);
        if !(denom > 0.0) {
            return Err(OplError::Domain(format!("reward variance is zero at c = {c}")));
        }
        gammas.push(ex.mean_reward(c) / denom);
    }
    Ok(grid_argmax(&ex.grid, gammas.into_iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::uniform_grid;

    fn uniform02(c: f64) -> f64 {
        (c / 2.0).clamp(0.0, 1.0)
    }

    #[test]
    fn constant_alpha_picks_largest_point() {
        let ex = ClosedFormExample::new(|_| 1.0, uniform02, 1.0, uniform_grid(0.0, 2.0, 11));
        assert_eq!(example1_optimum(&ex).unwrap(), (2.0, 1.0));
    }

    #[test]
    fn step_distribution() {
        let ex = ClosedFormExample::new(|c| 2.0 + c, |c| f64::from(u8::from(c >= 0.7)), 1.0, uniform_grid(0.0, 1.0, 11));
        let (c, _) = example1_optimum(&ex).unwrap();
        assert!(c >= 0.7);
    }

    #[test]
    fn zero_cdf_ties_to_smallest() {
        let ex = ClosedFormExample::new(|_| 3.0, |_| 0.0, 1.0, vec![-2.0, -1.0, 0.0]);
        assert_eq!(example2_optimum(&ex).unwrap(), (-2.0, 0.0));
    }

    #[test]
    fn zero_denominator_is_guarded() {
        let ex = ClosedFormExample::new(|_| 3.0, |c| f64::from(u8::from(c > 0.0)), 0.0, vec![-1.0, 1.0]);
        assert!(matches!(example2_optimum(&ex), Err(OplError::Domain(_))));
    }

    #[test]
    fn invalid_cdf_rejected() {
        let ex = ClosedFormExample::new(|_| 1.0, |c| 1.0 - c, 1.0, vec![0.0, 0.5]);
        assert!(example1_optimum(&ex).is_err());
        let empty = ClosedFormExample::new(|_| 1.0, uniform02, 1.0, vec![]);
        assert!(example1_optimum(&empty).is_err());
    }
}
