//! Overlap checks, match rates, and the two identification-failure
//! experiments: extrapolation under weak overlap and hidden confounding.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::data::synthetic::argmax;
use crate::data::{generate_synthetic, Dataset, DgpCoefficients, DgpSpec, NoiseModel};
use crate::error::{OplError, Result};
use crate::nuisance::{
    fit_batch, fit_conditional_means_with, Basis, NuisanceConfig, NuisanceEstimates,
    PropensityConfig,
};
use crate::policy::first_best;
use crate::value::value_dr;

pub const DEFAULT_WEAK_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OverlapVerdict {
    Strong,
    Weak,
    Failing,
}

impl fmt::Display for OverlapVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OverlapVerdict::Strong => "strong",
            OverlapVerdict::Weak => "weak",
            OverlapVerdict::Failing => "failing",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub p_min: f64,
    pub weak_threshold: f64,
    pub min_propensity: Vec<f64>,
    /// Share of units whose estimated propensity for the arm is below `p_min`.
    pub fraction_below: Vec<f64>,
    /// `coverage[arm][feature] = (min, max)` over units observed with `arm`.
    pub coverage: Vec<Vec<(f64, f64)>>,
    /// Share of all unit-arm cells below `p_min`.
    pub overall_fraction_below: f64,
    pub verdict: OverlapVerdict,
}

impl OverlapReport {
    pub fn write_csv<W: Write>(&self, writer: W, feature_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["arm", "min_propensity", "fraction_below", "feature", "feature_min", "feature_max", "verdict"])?;
        for (arm, cov) in self.coverage.iter().enumerate() {
            for (k, (lo, hi)) in cov.iter().enumerate() {
                let name = feature_names.get(k).cloned().unwrap_or_else(|| k.to_string());
                w.write_record([
                    arm.to_string(),
                    self.min_propensity[arm].to_string(),
                    self.fraction_below[arm].to_string(),
                    name,
                    lo.to_string(),
                    hi.to_string(),
                    self.verdict.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Strong when no unit-arm propensity is below `p_min`, weak when the
/// share below stays under `weak_threshold`, failing otherwise.
pub fn overlap_report(
    data: &Dataset,
    nuisance: &NuisanceEstimates,
    p_min: f64,
    weak_threshold: f64,
) -> Result<OverlapReport> {
    if nuisance.len() != data.len() || nuisance.arms() != data.arm_count() {
        return Err(OplError::LengthMismatch {
            what: "nuisance vs dataset",
            left: nuisance.len(),
            right: data.len(),
        });
    }
    if !(p_min >= 0.0) || !(weak_threshold >= 0.0) {
        return Err(OplError::InvalidInput("p_min and weak_threshold must be non-negative".into()));
    }
    let arms = data.arm_count();
    let n = data.len() as f64;
    let p = nuisance.p_hat();
    let mut min_propensity = vec![f64::INFINITY; arms];
    let mut below = vec![0usize; arms];
    for row in p.rows() {
        for (j, &v) in row.iter().enumerate() {
            min_propensity[j] = min_propensity[j].min(v);
            if v < p_min {
                below[j] += 1;
            }
        }
    }
    let mut coverage = vec![vec![(f64::INFINITY, f64::NEG_INFINITY); data.n_features()]; arms];
    for i in 0..data.len() {
        let arm = data.actions()[i];
        for (k, &x) in data.row(i).iter().enumerate() {
            let c = &mut coverage[arm][k];
            c.0 = c.0.min(x);
            c.1 = c.1.max(x);
        }
    }
    let total_below: usize = below.iter().sum();
    let overall = total_below as f64 / (n * arms as f64);
    let verdict = if total_below == 0 {
        OverlapVerdict::Strong
    } else if overall < weak_threshold {
        OverlapVerdict::Weak
    } else {
        OverlapVerdict::Failing
    };
    Ok(OverlapReport {
        p_min,
        weak_threshold,
        min_propensity,
        fraction_below: below.iter().map(|&b| b as f64 / n).collect(),
        coverage,
        overall_fraction_below: overall,
        verdict,
    })
}

/// Fits the default learners with a negligible trimming floor, so that
/// propensities under `p_min` remain visible, then reports.
pub fn diagnose_overlap(data: &Dataset, ridge: f64, p_min: f64, weak_threshold: f64) -> Result<OverlapReport> {
    let config = NuisanceConfig {
        ridge,
        propensity: PropensityConfig {
            floor: 1e-12,
            ..PropensityConfig::default()
        },
        ..NuisanceConfig::default()
    };
    let nuisance = fit_batch(data, &config)?;
    overlap_report(data, &nuisance, p_min, weak_threshold)
}

/// Share of positions where the two assignments agree.
pub fn match_rate(actual: &[usize], optimal: &[usize]) -> Result<f64> {
    if actual.len() != optimal.len() {
        return Err(OplError::LengthMismatch {
            what: "match rate inputs",
            left: actual.len(),
            right: optimal.len(),
        });
    }
    if actual.is_empty() {
        return Err(OplError::EmptyDataset);
    }
    let hits = actual.iter().zip(optimal).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / actual.len() as f64)
}

/// Two-arm, one-feature process for the weak-overlap experiment. Arm 0 has
/// mean `x^2` and arm 1 the constant `baseline`, so arm 0 is optimal
/// everywhere. Arm 1's assignment score is `-steepness x`, which leaves
/// arm 0 scarce for negative `x` unless the overlap floor lifts it.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionDesign {
    pub baseline: f64,
    pub steepness: f64,
    pub noise_sd: f64,
    pub ridge: f64,
    /// Percentile of the pooled feature used as the sparse-region probe.
    pub sparse_percentile: f64,
    /// Percentile used as the well-covered probe.
    pub dense_percentile: f64,
}

impl Default for InversionDesign {
    fn default() -> Self {
        Self {
            baseline: -0.3,
            steepness: 20.0,
            noise_sd: 0.5,
            ridge: 0.0,
            sparse_percentile: 0.01,
            dense_percentile: 0.99,
        }
    }
}

impl InversionDesign {
    pub fn spec(&self, n: usize, floor: f64) -> DgpSpec {
        DgpSpec {
            n,
            n_features: 1,
            arms: 2,
            coefficient_seed: 0,
            noise: NoiseModel::Homoskedastic { sd: self.noise_sd },
            overlap_floor: floor,
            confounder_strength: 0.0,
            reveal_confounder: false,
            coefficients: Some(DgpCoefficients {
                intercepts: vec![0.0, self.baseline],
                slopes: vec![vec![0.0], vec![0.0]],
                curvature: vec![1.0, 0.0],
                score_intercepts: vec![0.0, 0.0],
                score_slopes: vec![vec![0.0], vec![-self.steepness]],
                confounder_loadings: vec![0.0, 1.0],
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionRow {
    pub floor: f64,
    pub probe: &'static str,
    pub inversions: usize,
    pub trials: usize,
    pub frequency: f64,
}

pub fn inversion_experiment(floors: &[f64], seeds: &[u64], n: usize) -> Result<Vec<InversionRow>> {
    inversion_experiment_with(&InversionDesign::default(), floors, seeds, n)
}

/// For every floor and seed: draw data, fit linear conditional means, and
/// check whether the fitted argmax at each probe disagrees with the true
/// optimum.
pub fn inversion_experiment_with(
    design: &InversionDesign,
    floors: &[f64],
    seeds: &[u64],
    n: usize,
) -> Result<Vec<InversionRow>> {
    if seeds.is_empty() {
        return Err(OplError::InvalidInput("no seeds".into()));
    }
    let mut rows = Vec::new();
    for &floor in floors {
        let spec = design.spec(n, floor);
        let flips: Vec<(bool, bool)> = seeds
            .par_iter()
            .map(|&seed| {
                let (data, truth) = generate_synthetic(&spec, seed)?;
                let model = fit_conditional_means_with(&data, design.ridge, &Basis::linear())?;
                let mut x: Vec<f64> = data.features().column(0).to_vec();
                x.sort_by(f64::total_cmp);
                let check = |q: f64| {
                    let probe = [quantile(&x, q)];
                    let fitted = argmax(&model.predict_row(&probe));
                    fitted != truth.optimal_arm(&probe)
                };
                Ok((check(design.sparse_percentile), check(design.dense_percentile)))
            })
            .collect::<Result<_>>()?;
        for (probe, pick) in [("sparse", 0usize), ("dense", 1usize)] {
            let inversions = flips.iter().filter(|f| if pick == 0 { f.0 } else { f.1 }).count();
            rows.push(InversionRow {
                floor,
                probe,
                inversions,
                trials: seeds.len(),
                frequency: inversions as f64 / seeds.len() as f64,
            });
        }
    }
    Ok(rows)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn write_inversion_csv<W: Write>(rows: &[InversionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["floor", "probe", "inversions", "trials", "frequency"])?;
    for r in rows {
        w.write_record([
            r.floor.to_string(),
            r.probe.to_string(),
            r.inversions.to_string(),
            r.trials.to_string(),
            r.frequency.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundingRow {
    pub gamma: f64,
    /// Whether the confounder was included as a feature.
    pub revealed: bool,
    pub median_abs_bias: f64,
    pub mean_bias: f64,
    /// Monte Carlo standard error of `mean_bias`.
    pub standard_error: f64,
    /// Mean true regret of the learned rule.
    pub mean_true_regret: f64,
}

pub fn confounding_sweep(gammas: &[f64], seeds: &[u64], n: usize) -> Result<Vec<ConfoundingRow>> {
    let base = DgpSpec::reference(n);
    let mut rows = Vec::new();
    for &gamma in gammas {
        rows.push(confounding_point(&base, gamma, false, seeds)?);
    }
    Ok(rows)
}

/// One point of the sweep. Each seed draws `base.n` units, learns the
/// first-best rule on the first half and estimates its value by DR on the
/// second half; bias is measured against the rule's true value on the
/// second half's features.
pub fn confounding_point(base: &DgpSpec, gamma: f64, reveal: bool, seeds: &[u64]) -> Result<ConfoundingRow> {
    if seeds.len() < 2 {
        return Err(OplError::InvalidInput("need at least two seeds".into()));
    }
    let spec = DgpSpec {
        confounder_strength: gamma,
        reveal_confounder: reveal,
        ..base.clone()
    };
    let config = NuisanceConfig {
        ridge: 0.0,
        mean_basis: Basis::with_squares(vec![0]),
        ..NuisanceConfig::default()
    };
    let draws: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let (data, truth) = generate_synthetic(&spec, seed)?;
            let half = data.len() / 2;
            let learn = data.subset(&(0..half).collect::<Vec<_>>())?;
            let eval = data.subset(&(half..data.len()).collect::<Vec<_>>())?;
            let model = fit_conditional_means_with(&learn, config.ridge, &config.mean_basis)?;
            let policy = first_best(&model.predict_matrix(eval.features()));
            let nuisance = fit_batch(&eval, &config)?;
            let estimate = value_dr(&eval, &policy, &nuisance)?.value;
            let actual = truth.sample_value(eval.features(), &policy);
            let best = truth.sample_value(eval.features(), &truth.optimal_policy(eval.features()));
            Ok((estimate - actual, best - actual))
        })
        .collect::<Result<_>>()?;
    let m = draws.len() as f64;
    let mean_bias = draws.iter().map(|d| d.0).sum::<f64>() / m;
    let var = draws.iter().map(|d| (d.0 - mean_bias).powi(2)).sum::<f64>() / (m - 1.0);
    let mut abs: Vec<f64> = draws.iter().map(|d| d.0.abs()).collect();
    abs.sort_by(f64::total_cmp);
    Ok(ConfoundingRow {
        gamma,
        revealed: reveal,
        median_abs_bias: quantile(&abs, 0.5),
        mean_bias,
        standard_error: (var / m).sqrt(),
        mean_true_regret: draws.iter().map(|d| d.1).sum::<f64>() / m,
    })
}

pub fn write_confounding_csv<W: Write>(rows: &[ConfoundingRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["gamma", "revealed", "median_abs_bias", "mean_bias", "standard_error", "mean_true_regret"])?;
    for r in rows {
        w.write_record([
            r.gamma.to_string(),
            u8::from(r.revealed).to_string(),
            r.median_abs_bias.to_string(),
            r.mean_bias.to_string(),
            r.standard_error.to_string(),
            r.mean_true_regret.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::Provenance;
    use ndarray::Array2;

    #[test]
    fn match_rate_basics() {
        assert_eq!(match_rate(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(match_rate(&[0, 1, 2], &[1, 2, 0]).unwrap(), 0.0);
        assert!(match_rate(&[0], &[0, 1]).is_err());
    }

    fn toy(p: Array2<f64>) -> (Dataset, NuisanceEstimates) {
        let n = p.nrows();
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let actions: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Dataset::new(x, actions, vec![0.0; n], 2, vec!["x".into()]).unwrap();
        let est = NuisanceEstimates::new(Array2::zeros((n, 2)), p, Provenance::Supplied).unwrap();
        (data, est)
    }

    #[test]
    fn verdict_thresholds() {
        let mut p = Array2::from_elem((10, 2), 0.5);
        let (data, est) = toy(p.clone());
        assert_eq!(overlap_report(&data, &est, 0.1, 0.05).unwrap().verdict, OverlapVerdict::Strong);
        p[[0, 0]] = 0.01;
        p[[0, 1]] = 0.99;
        let (data, est) = toy(p.clone());
        let r = overlap_report(&data, &est, 0.1, 0.06).unwrap();
        assert_eq!(r.verdict, OverlapVerdict::Weak);
        assert!((r.fraction_below[0] - 0.1).abs() < 1e-12);
        assert_eq!(overlap_report(&data, &est, 0.1, 0.05).unwrap().verdict, OverlapVerdict::Failing);
        assert_eq!(overlap_report(&data, &est, 0.0, 0.05).unwrap().verdict, OverlapVerdict::Strong);
        assert_eq!(r.coverage[1][0], (1.0, 9.0));
    }
}
