use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{fit_conditional_means_with, fit_propensity_with, NuisanceConfig, NuisanceEstimates, Provenance};
use crate::data::Dataset;
use crate::error::{OplError, Result};

/// Assignment of units to `K` folds. Labels are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    labels: Vec<usize>,
}

impl FoldPlan {
    /// Seeded shuffle of `0..n`, then `k` contiguous blocks whose sizes
    /// differ by at most one.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(OplError::InvalidInput(format!("need at least 2 folds, got {k}")));
        }
        if k > n {
            return Err(OplError::InvalidInput(format!("{k} folds for {n} units")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut labels = vec![0; n];
        let (base, extra) = (n / k, n % k);
        let mut pos = 0;
        for fold in 0..k {
            let size = base + usize::from(fold < extra);
            for &unit in &order[pos..pos + size] {
                labels[unit] = fold;
            }
            pos += size;
        }
        Ok(Self { k, labels })
    }

    pub fn from_labels(k: usize, labels: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(OplError::InvalidInput(format!("need at least 2 folds, got {k}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(OplError::InvalidInput(format!("fold label {bad} out of range for K={k}")));
        }
        Ok(Self { k, labels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn fold_of(&self, unit: usize) -> usize {
        self.labels[unit]
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] != fold).collect()
    }
}

/// Out-of-fold nuisance predictions with the default learners.
pub fn cross_fit(data: &Dataset, k: usize, seed: u64, ridge: f64, p_min: f64) -> Result<NuisanceEstimates> {
    let plan = FoldPlan::new(data.len(), k, seed)?;
    cross_fit_with(data, &plan, &NuisanceConfig::new(ridge, p_min))
}

/// Each unit's predictions come from models fitted on the other folds.
/// Folds are fitted in parallel and merged by fold index.
pub fn cross_fit_with(data: &Dataset, plan: &FoldPlan, config: &NuisanceConfig) -> Result<NuisanceEstimates> {
    if plan.len() != data.len() {
        return Err(OplError::LengthMismatch {
            what: "fold plan vs dataset",
            left: plan.len(),
            right: data.len(),
        });
    }
    let arms = data.arm_count();
    for fold in 0..plan.k() {
        let mut seen = vec![false; arms];
        for (i, &a) in data.actions().iter().enumerate() {
            if plan.fold_of(i) != fold {
                seen[a] = true;
            }
        }
        if let Some(arm) = seen.iter().position(|s| !s) {
            return Err(OplError::FoldCoverage { fold, arm });
        }
    }

    let parts: Vec<(Vec<usize>, Array2<f64>, Array2<f64>)> = (0..plan.k())
        .into_par_iter()
        .map(|fold| {
            let test = plan.test_indices(fold);
            let train = data.subset(&plan.train_indices(fold))?;
            let means = fit_conditional_means_with(&train, config.ridge, &config.mean_basis)?;
            let propensity = fit_propensity_with(&train, &config.propensity)?;
            let held_out = data.subset(&test)?;
            Ok((
                test,
                means.predict_matrix(held_out.features()),
                propensity.predict_matrix(held_out.features()),
            ))
        })
        .collect::<Result<_>>()?;

    let mut mu = Array2::zeros((data.len(), arms));
    let mut p = Array2::zeros((data.len(), arms));
    for (test, mu_fold, p_fold) in parts {
        for (r, &i) in test.iter().enumerate() {
            mu.row_mut(i).assign(&mu_fold.row(r));
            p.row_mut(i).assign(&p_fold.row(r));
        }
    }
    NuisanceEstimates::new(mu, p, Provenance::CrossFit(plan.k()))
}
