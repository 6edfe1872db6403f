//! Conditional variance, risk-adjusted utilities and the risk-adjusted
//! first-best rule.

mod examples;
mod sweep;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::synthetic::argmax;
use crate::data::Dataset;
use crate::error::{OplError, Result};
use crate::nuisance::{Basis, ConditionalMeanModel};

pub use examples::{example1_optimum, example2_optimum, ClosedFormExample};
pub use sweep::{risk_sweep, RiskSweepConfig, RiskSweepReport, RegimeSummary};

/// Preference over conditional mean and dispersion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskRegime {
    Neutral,
    /// `mu / sigma`
    Linear,
    /// `mu / sigma^2`
    Quadratic,
    /// `-(sigma^2 - rho mu)`, with `rho` the absolute risk tolerance.
    MeanVariance { rho: f64 },
}

impl fmt::Display for RiskRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskRegime::Neutral => f.write_str("neutral"),
            RiskRegime::Linear => f.write_str("linear"),
            RiskRegime::Quadratic => f.write_str("quadratic"),
            RiskRegime::MeanVariance { rho } => write!(f, "mv(rho={rho})"),
        }
    }
}

impl FromStr for RiskRegime {
    type Err = OplError;

    /// `neutral`, `linear`, `quadratic`, `mv` (rho 1) or `mv:<rho>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "neutral" => Ok(RiskRegime::Neutral),
            "linear" => Ok(RiskRegime::Linear),
            "quadratic" => Ok(RiskRegime::Quadratic),
            "mv" | "mean-variance" => Ok(RiskRegime::MeanVariance { rho: 1.0 }),
            other => match other.strip_prefix("mv:") {
                Some(rho) => rho
                    .parse()
                    .map(|rho| RiskRegime::MeanVariance { rho })
                    .map_err(|_| OplError::InvalidInput(format!("bad risk tolerance in `{s}`"))),
                None => Err(OplError::InvalidInput(format!(
                    "unknown risk regime `{s}` (expected neutral, linear, quadratic or mv)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskProfile {
    pub regime: RiskRegime,
    /// Lower bound applied to `sigma` in the ratio utilities.
    pub sigma_floor: f64,
}

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

impl RiskProfile {
    pub fn new(regime: RiskRegime) -> Result<Self> {
        Self::with_floor(regime, DEFAULT_SIGMA_FLOOR)
    }

    pub fn with_floor(regime: RiskRegime, sigma_floor: f64) -> Result<Self> {
        if !(sigma_floor > 0.0) || !sigma_floor.is_finite() {
            return Err(OplError::InvalidInput(format!("sigma floor {sigma_floor} must be positive")));
        }
        if let RiskRegime::MeanVariance { rho } = regime {
            if !(rho >= 0.0) || !rho.is_finite() {
                return Err(OplError::InvalidInput(format!("risk tolerance {rho} must be >= 0")));
            }
        }
        Ok(Self { regime, sigma_floor })
    }

    pub fn neutral() -> Self {
        Self {
            regime: RiskRegime::Neutral,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    /// Whether selection needs a dispersion estimate.
    pub fn needs_variance(&self) -> bool {
        self.regime != RiskRegime::Neutral
    }
}

/// Higher is better in every regime.
pub fn utility(mu: f64, sigma: f64, profile: &RiskProfile) -> f64 {
    let s = sigma.max(profile.sigma_floor);
    match profile.regime {
        RiskRegime::Neutral => mu,
        RiskRegime::Linear => mu / s,
        RiskRegime::Quadratic => mu / (s * s),
        RiskRegime::MeanVariance { rho } => -(sigma * sigma - rho * mu),
    }
}

/// Per-arm fits of `E[Y | x]` and `E[Y^2 | x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceModel {
    pub first: ConditionalMeanModel,
    pub second: ConditionalMeanModel,
}

impl VarianceModel {
    pub fn fit(data: &Dataset, ridge: f64, basis: &Basis) -> Result<Self> {
        let squares: Vec<f64> = data.rewards().iter().map(|y| y * y).collect();
        Ok(Self {
            first: ConditionalMeanModel::fit(data, data.rewards(), ridge, basis)?,
            second: ConditionalMeanModel::fit(data, &squares, ridge, basis)?,
        })
    }

    /// `E^(Y^2) - E^(Y)^2`, clamped below at zero.
    pub fn variance_row(&self, row: &[f64]) -> Vec<f64> {
        let m = self.first.predict_row(row);
        let s = self.second.predict_row(row);
        clamp_difference(&s, &m)
    }

    pub fn variance_matrix(&self, features: &Array2<f64>) -> Array2<f64> {
        let m = self.first.predict_matrix(features);
        let s = self.second.predict_matrix(features);
        let mut out = s - &m * &m;
        out.mapv_inplace(|v| v.max(0.0));
        out
    }
}

fn clamp_difference(second: &[f64], first: &[f64]) -> Vec<f64> {
    second.iter().zip(first).map(|(s, m)| (s - m * m).max(0.0)).collect()
}

/// In-sample `sigma^2` for every unit and arm from two ridge regressions
/// per arm.
pub fn conditional_variance(data: &Dataset, ridge: f64) -> Result<Array2<f64>> {
    conditional_variance_with(data, ridge, &Basis::linear())
}

pub fn conditional_variance_with(data: &Dataset, ridge: f64, basis: &Basis) -> Result<Array2<f64>> {
    Ok(VarianceModel::fit(data, ridge, basis)?.variance_matrix(data.features()))
}

/// Per-unit, per-arm mean, dispersion and utility with the chosen arm.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskAdjustedScores {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub utility: Array2<f64>,
    pub chosen: Vec<usize>,
}

impl RiskAdjustedScores {
    pub fn new(mu: &Array2<f64>, sigma: &Array2<f64>, profile: &RiskProfile) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(OplError::InvalidInput(format!(
                "mu is {:?} but sigma is {:?}",
                mu.dim(),
                sigma.dim()
            )));
        }
        if sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(OplError::InvalidInput("sigma must be non-negative".into()));
        }
        let utility = Array2::from_shape_fn(mu.dim(), |(i, j)| utility(mu[[i, j]], sigma[[i, j]], profile));
        let chosen = utility.rows().into_iter().map(|r| argmax(&r.to_vec())).collect();
        Ok(Self {
            mu: mu.clone(),
            sigma: sigma.clone(),
            utility,
            chosen,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "arm", "mu_hat", "sigma_hat", "utility", "chosen"])?;
        for (i, &c) in self.chosen.iter().enumerate() {
            for j in 0..self.mu.ncols() {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    self.mu[[i, j]].to_string(),
                    self.sigma[[i, j]].to_string(),
                    self.utility[[i, j]].to_string(),
                    u8::from(c == j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-unit utility argmax, ties to the lowest arm. `sigma` holds
/// standard deviations.
pub fn risk_adjusted_first_best(mu: &Array2<f64>, sigma: &Array2<f64>, profile: &RiskProfile) -> Result<Vec<usize>> {
    Ok(RiskAdjustedScores::new(mu, sigma, profile)?.chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DgpSpec};
    use crate::policy::first_best;
    use ndarray::array;

    fn profile(regime: RiskRegime) -> RiskProfile {
        RiskProfile::new(regime).unwrap()
    }

    #[test]
    fn utilities_direct_evaluation() {
        assert_eq!(utility(10.0, 2.0, &profile(RiskRegime::Linear)), 5.0);
        assert_eq!(utility(10.0, 2.0, &profile(RiskRegime::Quadratic)), 2.5);
        assert_eq!(utility(10.0, 2.0, &profile(RiskRegime::Neutral)), 10.0);
        assert_eq!(utility(3.0, 0.0, &profile(RiskRegime::Linear)), 3.0 / DEFAULT_SIGMA_FLOOR);
    }

    #[test]
    fn ordering_reversal_between_linear_and_quadratic() {
        let (a, b) = ((8.0, 2.0), (2.0, 1.0));
        let lin = profile(RiskRegime::Linear);
        let quad = profile(RiskRegime::Quadratic);
        assert!(utility(a.0, a.1, &lin) > utility(b.0, b.1, &lin));
        assert_eq!(utility(a.0, a.1, &quad), utility(b.0, b.1, &quad));
    }

    #[test]
    fn mean_variance_arithmetic() {
        let mv = profile(RiskRegime::MeanVariance { rho: 2.0 });
        let s1 = utility(1.0, 2.0, &mv);
        let s2 = utility(2.0, 5f64.sqrt(), &mv);
        assert_eq!(s1, -2.0);
        assert!((s2 + 1.0).abs() < 1e-12);
        let chosen = risk_adjusted_first_best(&array![[1.0, 2.0]], &array![[2.0, 5f64.sqrt()]], &mv).unwrap();
        assert_eq!(chosen, vec![1]);
    }

    #[test]
    fn limits_of_mean_variance() {
        let mu = array![[1.0, 3.0, 2.0], [5.0, 4.0, 0.0]];
        let sigma = array![[1.0, 0.5, 2.0], [0.1, 3.0, 0.2]];
        let var_min = risk_adjusted_first_best(&mu, &sigma, &profile(RiskRegime::MeanVariance { rho: 0.0 })).unwrap();
        assert_eq!(var_min, vec![1, 0]);
        let big = risk_adjusted_first_best(&mu, &sigma, &profile(RiskRegime::MeanVariance { rho: 1e6 })).unwrap();
        assert_eq!(big, first_best(&mu));
        assert_eq!(risk_adjusted_first_best(&mu, &sigma, &RiskProfile::neutral()).unwrap(), first_best(&mu));
    }

    #[test]
    fn profile_validation_and_parsing() {
        assert!(RiskProfile::with_floor(RiskRegime::Linear, 0.0).is_err());
        assert!(RiskProfile::new(RiskRegime::MeanVariance { rho: -1.0 }).is_err());
        assert_eq!("mv:2.5".parse::<RiskRegime>().unwrap(), RiskRegime::MeanVariance { rho: 2.5 });
        assert_eq!("Quadratic".parse::<RiskRegime>().unwrap(), RiskRegime::Quadratic);
        assert!("cvar".parse::<RiskRegime>().is_err());
    }

    #[test]
    fn constant_rewards_have_zero_variance() {
        let (data, _) = generate_synthetic(&DgpSpec::reference(200), 4).unwrap();
        let rewards: Vec<f64> = data.actions().iter().map(|&a| a as f64 + 0.5).collect();
        let data = data.with_rewards(rewards).unwrap();
        let v = conditional_variance(&data, 0.0).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn negative_difference_is_clamped() {
        assert_eq!(clamp_difference(&[0.7, 2.0], &[1.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn scores_csv() {
        let s = RiskAdjustedScores::new(&array![[1.0, 2.0]], &array![[1.0, 4.0]], &profile(RiskRegime::Linear)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "unit,arm,mu_hat,sigma_hat,utility,chosen\n0,0,1,1,1,1\n0,1,2,4,0.5,0\n"
        );
    }
}
