//! Value estimation for a fixed assignment of arms to units, regret, and
//! sample-analogue evaluators of the estimators' bias and variance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::Dataset;
use crate::error::{OplError, Result};
use crate::nuisance::NuisanceEstimates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    /// Regression adjustment (direct method).
    Ra,
    /// Inverse propensity weighting.
    Ipw,
    /// Doubly robust (augmented IPW).
    Dr,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Ra, Estimator::Ipw, Estimator::Dr];
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Ra => "RA",
            Estimator::Ipw => "IPW",
            Estimator::Dr => "DR",
        })
    }
}

impl FromStr for Estimator {
    type Err = OplError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ra" => Ok(Estimator::Ra),
            "ipw" => Ok(Estimator::Ipw),
            "dr" => Ok(Estimator::Dr),
            _ => Err(OplError::InvalidInput(format!("unknown estimator `{s}` (expected ra, ipw or dr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueReport {
    pub estimator: Estimator,
    pub value: f64,
    /// Units whose observed arm equals the policy arm. For RA this is the
    /// same count, reported for comparability.
    pub n_effective: usize,
}

fn check_assignments(assignments: &[usize], nuisance: &NuisanceEstimates) -> Result<()> {
    if assignments.len() != nuisance.len() {
        return Err(OplError::LengthMismatch {
            what: "assignments vs nuisance rows",
            left: assignments.len(),
            right: nuisance.len(),
        });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= nuisance.arms()) {
        return Err(OplError::InvalidInput(format!("assigned arm {bad} out of range")));
    }
    Ok(())
}

fn matches(data: &Dataset, assignments: &[usize]) -> usize {
    data.actions().iter().zip(assignments).filter(|(d, a)| d == a).count()
}

/// Mean of the plug-in predictions at the assigned arms.
pub fn value_ra(assignments: &[usize], nuisance: &NuisanceEstimates) -> Result<ValueReport> {
    check_assignments(assignments, nuisance)?;
    let mu = nuisance.mu_hat();
    let total: f64 = assignments.iter().enumerate().map(|(i, &a)| mu[[i, a]]).sum();
    Ok(ValueReport {
        estimator: Estimator::Ra,
        value: total / assignments.len() as f64,
        n_effective: assignments.len(),
    })
}

/// Inverse propensity weighted mean of matching units' rewards.
pub fn value_ipw(data: &Dataset, assignments: &[usize], nuisance: &NuisanceEstimates) -> Result<ValueReport> {
    nuisance.check_observed(data)?;
    check_assignments(assignments, nuisance)?;
    let p = nuisance.p_hat();
    let mut total = 0.0;
    for (i, (&d, &a)) in data.actions().iter().zip(assignments).enumerate() {
        if d == a {
            total += data.rewards()[i] / p[[i, d]];
        }
    }
    Ok(ValueReport {
        estimator: Estimator::Ipw,
        value: total / data.len() as f64,
        n_effective: matches(data, assignments),
    })
}

/// Plug-in prediction plus the propensity-weighted residual of matching units.
pub fn value_dr(data: &Dataset, assignments: &[usize], nuisance: &NuisanceEstimates) -> Result<ValueReport> {
    nuisance.check_observed(data)?;
    check_assignments(assignments, nuisance)?;
    let mu = nuisance.mu_hat();
    let p = nuisance.p_hat();
    let mut total = 0.0;
    for (i, (&d, &a)) in data.actions().iter().zip(assignments).enumerate() {
        let mut score = mu[[i, a]];
        if d == a {
            score += (data.rewards()[i] - mu[[i, d]]) / p[[i, d]];
        }
        total += score;
    }
    Ok(ValueReport {
        estimator: Estimator::Dr,
        value: total / data.len() as f64,
        n_effective: matches(data, assignments),
    })
}

pub fn estimate(
    estimator: Estimator,
    data: &Dataset,
    assignments: &[usize],
    nuisance: &NuisanceEstimates,
) -> Result<ValueReport> {
    match estimator {
        Estimator::Ra => {
            nuisance.check_against(data)?;
            let mut report = value_ra(assignments, nuisance)?;
            report.n_effective = matches(data, assignments);
            Ok(report)
        }
        Estimator::Ipw => value_ipw(data, assignments, nuisance),
        Estimator::Dr => value_dr(data, assignments, nuisance),
    }
}

/// `V(pi*) - V(pi)`; both reports must come from the same estimator.
pub fn regret(optimal: &ValueReport, policy: &ValueReport) -> Result<f64> {
    if optimal.estimator != policy.estimator {
        return Err(OplError::EstimatorMismatch(optimal.estimator, policy.estimator));
    }
    Ok(optimal.value - policy.value)
}

/// Per-unit, per-arm scores `G[i, j]` such that the estimator's value of an
/// assignment is the mean of `G[i, a_i]`.
pub fn score_matrix(estimator: Estimator, data: &Dataset, nuisance: &NuisanceEstimates) -> Result<Array2<f64>> {
    if estimator == Estimator::Ra {
        nuisance.check_against(data)?;
    } else {
        nuisance.check_observed(data)?;
    }
    let mu = nuisance.mu_hat();
    let p = nuisance.p_hat();
    let mut g = match estimator {
        Estimator::Ra | Estimator::Dr => mu.clone(),
        Estimator::Ipw => Array2::zeros(mu.dim()),
    };
    if estimator != Estimator::Ra {
        for (i, &d) in data.actions().iter().enumerate() {
            let y = data.rewards()[i];
            g[[i, d]] += match estimator {
                Estimator::Ipw => y / p[[i, d]],
                _ => (y - mu[[i, d]]) / p[[i, d]],
            };
        }
    }
    Ok(g)
}

pub fn write_reports<W: Write>(reports: &[ValueReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "value", "n_effective"])?;
    for r in reports {
        w.write_record([r.estimator.to_string(), r.value.to_string(), r.n_effective.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Picks `m[i, a_i]` for every unit.
pub fn policy_column(matrix: &Array2<f64>, assignments: &[usize]) -> Vec<f64> {
    assignments.iter().enumerate().map(|(i, &a)| matrix[[i, a]]).collect()
}

/// Nuisance errors at the policy arm: `delta_mu = mu_hat - mu`,
/// `delta_p = 1 - p / p_hat`, and the second moment of the weighted
/// residual `(Y - mu) 1[D = pi] / p_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationProfile {
    pub delta_mu: Vec<f64>,
    pub delta_p: Vec<f64>,
    /// Read as the mean of the squared weighted residual.
    pub eps_sq_mean: f64,
}

impl DeviationProfile {
    pub fn new(delta_mu: Vec<f64>, delta_p: Vec<f64>, eps_sq_mean: f64) -> Result<Self> {
        if delta_mu.len() != delta_p.len() {
            return Err(OplError::LengthMismatch {
                what: "delta_mu vs delta_p",
                left: delta_mu.len(),
                right: delta_p.len(),
            });
        }
        if delta_mu.is_empty() {
            return Err(OplError::EmptyDataset);
        }
        if delta_mu.iter().chain(&delta_p).any(|v| !v.is_finite()) || !eps_sq_mean.is_finite() || eps_sq_mean < 0.0 {
            return Err(OplError::InvalidInput("deviation profile must be finite".into()));
        }
        Ok(Self {
            delta_mu,
            delta_p,
            eps_sq_mean,
        })
    }

    /// Deviations of `estimated` from the true `mu`/`p` at the assigned arms.
    pub fn from_truth(
        assignments: &[usize],
        estimated: &NuisanceEstimates,
        true_mu: &Array2<f64>,
        true_p: &Array2<f64>,
        eps_sq_mean: f64,
    ) -> Result<Self> {
        check_assignments(assignments, estimated)?;
        if true_mu.dim() != estimated.mu_hat().dim() || true_p.dim() != estimated.p_hat().dim() {
            return Err(OplError::InvalidInput("true nuisance matrices do not match the estimates".into()));
        }
        let mut delta_mu = Vec::with_capacity(assignments.len());
        let mut delta_p = Vec::with_capacity(assignments.len());
        for (i, &a) in assignments.iter().enumerate() {
            delta_mu.push(estimated.mu_hat()[[i, a]] - true_mu[[i, a]]);
            delta_p.push(1.0 - true_p[[i, a]] / estimated.p_hat()[[i, a]]);
        }
        Self::new(delta_mu, delta_p, eps_sq_mean)
    }

    pub fn len(&self) -> usize {
        self.delta_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_mu.is_empty()
    }
}

/// Sample mean of `((Y - mu_pi) 1[D = pi] / p_hat_pi)^2`.
pub fn residual_second_moment(
    data: &Dataset,
    assignments: &[usize],
    true_mu: &Array2<f64>,
    p_hat: &Array2<f64>,
) -> Result<f64> {
    if assignments.len() != data.len() || true_mu.nrows() != data.len() || p_hat.nrows() != data.len() {
        return Err(OplError::LengthMismatch {
            what: "residual moment inputs",
            left: assignments.len(),
            right: data.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&d, &a)) in data.actions().iter().zip(assignments).enumerate() {
        if d == a {
            let e = (data.rewards()[i] - true_mu[[i, a]]) / p_hat[[i, a]];
            total += e * e;
        }
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorTriple {
    pub ra: f64,
    pub ipw: f64,
    pub dr: f64,
}

impl EstimatorTriple {
    pub fn get(&self, estimator: Estimator) -> f64 {
        match estimator {
            Estimator::Ra => self.ra,
            Estimator::Ipw => self.ipw,
            Estimator::Dr => self.dr,
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in v {
        n += 1;
        s += x;
    }
    s / n as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    mean(v.iter().map(|x| (x - m) * (x - m)))
}

fn check_len(profile: &DeviationProfile, other: &[f64], what: &'static str) -> Result<()> {
    if other.len() != profile.len() {
        return Err(OplError::LengthMismatch {
            what,
            left: other.len(),
            right: profile.len(),
        });
    }
    Ok(())
}

/// Absolute biases `|E D|`, `|E mu_pi d|`, `|E D d|` with `D = delta_mu`,
/// `d = delta_p`, expectations replaced by means over units.
pub fn bias_formulas(profile: &DeviationProfile, mu_pi: &[f64]) -> Result<EstimatorTriple> {
    check_len(profile, mu_pi, "mu_pi vs deviation profile")?;
    let (dm, dp) = (&profile.delta_mu, &profile.delta_p);
    Ok(EstimatorTriple {
        ra: mean(dm.iter().copied()).abs(),
        ipw: mean(mu_pi.iter().zip(dp).map(|(m, d)| m * d)).abs(),
        dr: mean(dm.iter().zip(dp).map(|(a, b)| a * b)).abs(),
    })
}

/// Variance of each estimator at sample size `n`, with every population
/// moment replaced by its mean over the profile's units:
///
/// * RA: `Var(mu + D) / n`
/// * IPW: `(E eps^2 + Var(mu - mu d) + E[(1-p)/p mu^2 (1-d)^2]) / n`
/// * DR: `(E eps^2 + Var(mu + D d) + E[(1-p)/p D^2 (1-d)^2]) / n`
pub fn variance_formulas(profile: &DeviationProfile, mu_pi: &[f64], p_pi: &[f64], n: usize) -> Result<EstimatorTriple> {
    check_len(profile, mu_pi, "mu_pi vs deviation profile")?;
    check_len(profile, p_pi, "p_pi vs deviation profile")?;
    if n == 0 {
        return Err(OplError::Domain("sample size must be positive".into()));
    }
    if let Some(bad) = p_pi.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(OplError::Domain(format!("propensity {bad} outside (0, 1]")));
    }
    let (dm, dp) = (&profile.delta_mu, &profile.delta_p);
    let n = n as f64;
    let ra: Vec<f64> = mu_pi.iter().zip(dm).map(|(m, d)| m + d).collect();
    let ipw_mean: Vec<f64> = mu_pi.iter().zip(dp).map(|(m, d)| m - m * d).collect();
    let dr_mean: Vec<f64> = mu_pi.iter().zip(dm).zip(dp).map(|((m, a), b)| m + a * b).collect();
    let weight = |i: usize| (1.0 - p_pi[i]) / p_pi[i] * (1.0 - dp[i]).powi(2);
    let ipw_extra = mean((0..mu_pi.len()).map(|i| weight(i) * mu_pi[i] * mu_pi[i]));
    let dr_extra = mean((0..mu_pi.len()).map(|i| weight(i) * dm[i] * dm[i]));
    Ok(EstimatorTriple {
        ra: variance(&ra) / n,
        ipw: (profile.eps_sq_mean + variance(&ipw_mean) + ipw_extra) / n,
        dr: (profile.eps_sq_mean + variance(&dr_mean) + dr_extra) / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::Provenance;
    use ndarray::{array, Array2};

    fn data(actions: Vec<usize>, rewards: Vec<f64>, arms: usize) -> Dataset {
        let n = actions.len();
        Dataset::new(Array2::zeros((n, 1)), actions, rewards, arms, vec!["x".into()]).unwrap()
    }

    fn nuisance(mu: Array2<f64>, p: Array2<f64>) -> NuisanceEstimates {
        NuisanceEstimates::new(mu, p, Provenance::Supplied).unwrap()
    }

    #[test]
    fn ra_direct_evaluation() {
        let est = nuisance(array![[1.0, 3.0], [2.0, 4.0]], Array2::from_elem((2, 2), 0.5));
        assert_eq!(value_ra(&[0, 1], &est).unwrap().value, 2.5);
        let flat = nuisance(Array2::from_elem((2, 2), 5.0), Array2::from_elem((2, 2), 0.5));
        assert_eq!(value_ra(&[1, 0], &flat).unwrap().value, 5.0);
    }

    #[test]
    fn ipw_direct_evaluation() {
        let d = data(vec![0, 1, 0, 1], vec![2.0, 4.0, 6.0, 8.0], 2);
        let est = nuisance(Array2::zeros((4, 2)), Array2::from_elem((4, 2), 0.5));
        let r = value_ipw(&d, &[0, 0, 0, 0], &est).unwrap();
        assert_eq!(r.value, 4.0);
        assert_eq!(r.n_effective, 2);
        let none = value_ipw(&d, &[1, 0, 1, 0], &est).unwrap();
        assert_eq!((none.value, none.n_effective), (0.0, 0));
    }

    #[test]
    fn dr_equals_ipw_at_zero_mu_and_ra_without_matches() {
        let d = data(vec![0, 1, 2, 1, 0], vec![1.0, -2.0, 3.5, 0.25, 7.0], 3);
        let p = array![
            [0.2, 0.3, 0.5],
            [0.1, 0.6, 0.3],
            [0.4, 0.4, 0.2],
            [0.3, 0.3, 0.4],
            [0.5, 0.25, 0.25]
        ];
        let est = nuisance(Array2::zeros((5, 3)), p.clone());
        let pi = [0, 2, 2, 1, 1];
        assert_eq!(value_dr(&d, &pi, &est).unwrap().value, value_ipw(&d, &pi, &est).unwrap().value);
        let mu = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.7 - 2.0);
        let est = nuisance(mu, p);
        let miss = [1, 0, 0, 2, 2];
        assert_eq!(value_dr(&d, &miss, &est).unwrap().value, value_ra(&miss, &est).unwrap().value);
    }

    #[test]
    fn observed_policy_with_unit_propensity_is_sample_mean() {
        let d = data(vec![0, 1, 1], vec![3.0, 5.0, 10.0], 2);
        let p = array![[1.0 - 1e-15, 1e-15], [1e-15, 1.0 - 1e-15], [1e-15, 1.0 - 1e-15]];
        let est = nuisance(array![[1.0, 9.0], [4.0, -1.0], [0.0, 2.0]], p);
        let actions = d.actions().to_vec();
        assert!((value_ipw(&d, &actions, &est).unwrap().value - 6.0).abs() < 1e-12);
        assert!((value_dr(&d, &actions, &est).unwrap().value - 6.0).abs() < 1e-12);
    }

    #[test]
    fn score_matrix_reproduces_estimators() {
        let d = data(vec![0, 1, 2, 1], vec![1.0, 2.0, 3.0, 4.0], 3);
        let p = Array2::from_elem((4, 3), 1.0 / 3.0);
        let mu = Array2::from_shape_fn((4, 3), |(i, j)| i as f64 - j as f64);
        let est = nuisance(mu, p);
        let pi = [0, 1, 1, 2];
        for e in Estimator::ALL {
            let g = score_matrix(e, &d, &est).unwrap();
            let v = policy_column(&g, &pi).iter().sum::<f64>() / 4.0;
            assert!((v - estimate(e, &d, &pi, &est).unwrap().value).abs() < 1e-12);
        }
    }

    #[test]
    fn regret_requires_matching_estimators() {
        let a = ValueReport {
            estimator: Estimator::Ra,
            value: 3.0,
            n_effective: 1,
        };
        let b = ValueReport {
            estimator: Estimator::Dr,
            ..a
        };
        assert_eq!(regret(&a, &a).unwrap(), 0.0);
        assert!(matches!(regret(&a, &b), Err(OplError::EstimatorMismatch(Estimator::Ra, Estimator::Dr))));
    }

    #[test]
    fn bias_formula_direct_evaluation() {
        let profile = DeviationProfile::new(vec![0.3; 4], vec![0.5; 4], 0.0).unwrap();
        let b = bias_formulas(&profile, &[2.0; 4]).unwrap();
        assert!((b.ra - 0.3).abs() < 1e-15);
        assert!((b.ipw - 1.0).abs() < 1e-15);
        assert!((b.dr - 0.15).abs() < 1e-15);
        let exact_mu = DeviationProfile::new(vec![0.0; 3], vec![0.2, -0.1, 0.4], 0.0).unwrap();
        let b = bias_formulas(&exact_mu, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((b.ra, b.dr), (0.0, 0.0));
        let exact_p = DeviationProfile::new(vec![0.2, -0.1, 0.4], vec![0.0; 3], 0.0).unwrap();
        let b = bias_formulas(&exact_p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((b.ipw, b.dr), (0.0, 0.0));
    }

    #[test]
    fn variance_formula_limits() {
        let mu = [1.0, 2.0, 3.0, 6.0];
        let profile = DeviationProfile::new(vec![0.0; 4], vec![0.0; 4], 0.7).unwrap();
        let v = variance_formulas(&profile, &mu, &[0.5; 4], 10).unwrap();
        assert!((v.ra - 3.5 / 10.0).abs() < 1e-12);
        assert!((v.dr - (0.7 + 3.5) / 10.0).abs() < 1e-12);
        let mean_sq = (1.0 + 4.0 + 9.0 + 36.0) / 4.0;
        assert!((v.ipw - (0.7 + 3.5 + mean_sq) / 10.0).abs() < 1e-12);
        assert!(matches!(variance_formulas(&profile, &mu, &[0.5, 0.0, 0.5, 0.5], 10), Err(OplError::Domain(_))));
    }

    #[test]
    fn estimator_parsing_and_csv() {
        assert_eq!("IPW".parse::<Estimator>().unwrap(), Estimator::Ipw);
        assert!("aipw".parse::<Estimator>().is_err());
        let mut buf = Vec::new();
        let r = ValueReport {
            estimator: Estimator::Dr,
            value: 1.5,
            n_effective: 3,
        };
        write_reports(&[r], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "estimator,value,n_effective\nDR,1.5,3\n");
    }

    #[test]
    fn degenerate_propensity_at_observed_arm() {
        let d = data(vec![0, 1, 1], vec![2.0, 4.0, 6.0], 2);
        let one_hot = nuisance(Array2::zeros((3, 2)), array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        assert_eq!(value_ipw(&d, &[0, 1, 1], &one_hot).unwrap().value, 4.0);
        let flipped = nuisance(Array2::zeros((3, 2)), array![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]);
        assert!(matches!(value_dr(&d, &[0, 1, 1], &flipped), Err(OplError::Domain(_))));
        assert!(value_ra(&[0, 1, 1], &flipped).is_ok());
    }
}
