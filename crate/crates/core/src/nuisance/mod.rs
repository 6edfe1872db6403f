//! Nuisance estimation: per-arm conditional means `mu_j(x)` and
//! propensities `p_j(x)`, fitted in batch, out-of-fold, or incrementally.

mod crossfit;
mod logistic;
mod ridge;

use ndarray::Array2;

use crate::data::Dataset;
use crate::error::{OplError, Result};

pub use crossfit::{cross_fit, cross_fit_with, FoldPlan};
pub use logistic::{apply_floor, fit_propensity, fit_propensity_with, PropensityConfig, PropensityModel};
pub use ridge::{fit_conditional_means, fit_conditional_means_with, ConditionalMeanModel};

/// Feature expansion used by the linear learners: a subset of the raw
/// columns plus squares of selected columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Basis {
    /// Raw columns to keep; `None` keeps all of them.
    pub columns: Option<Vec<usize>>,
    /// Columns whose squares are appended.
    pub squares: Vec<usize>,
}

impl Basis {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn with_squares(squares: Vec<usize>) -> Self {
        Self { columns: None, squares }
    }

    pub fn intercept_only() -> Self {
        Self {
            columns: Some(Vec::new()),
            squares: Vec::new(),
        }
    }

    pub fn columns(columns: Vec<usize>) -> Self {
        Self {
            columns: Some(columns),
            squares: Vec::new(),
        }
    }

    /// Number of expanded slopes for `n_features` raw features.
    pub fn width(&self, n_features: usize) -> usize {
        self.columns.as_ref().map_or(n_features, Vec::len) + self.squares.len()
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        let cols = self.columns.iter().flatten();
        if let Some(&bad) = cols.chain(&self.squares).find(|&&c| c >= n_features) {
            return Err(OplError::InvalidInput(format!(
                "basis refers to column {bad} but only {n_features} features exist"
            )));
        }
        Ok(())
    }

    pub fn expand_into(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match &self.columns {
            Some(cols) => out.extend(cols.iter().map(|&c| row[c])),
            None => out.extend_from_slice(row),
        }
        out.extend(self.squares.iter().map(|&c| row[c] * row[c]));
    }

    pub fn expand(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.expand_into(row, &mut out);
        out
    }

    pub(crate) fn to_text(&self) -> String {
        let cols = match &self.columns {
            None => "all".to_string(),
            Some(c) => join(c),
        };
        format!("{cols};{}", join(&self.squares))
    }

    pub(crate) fn from_text(s: &str) -> Result<Self> {
        let (cols, squares) = s
            .split_once(';')
            .ok_or_else(|| OplError::InvalidInput(format!("malformed basis `{s}`")))?;
        let columns = if cols == "all" { None } else { Some(parse_list(cols)?) };
        Ok(Self {
            columns,
            squares: parse_list(squares)?,
        })
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| OplError::InvalidInput(format!("bad index `{t}`")))
        })
        .collect()
}

/// Where a set of nuisance predictions came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Batch,
    CrossFit(usize),
    /// Supplied by the caller (oracle truth, planted deviations).
    Supplied,
}

/// Per-unit, per-arm predictions `mu_hat[i, j]` and `p_hat[i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceEstimates {
    mu_hat: Array2<f64>,
    p_hat: Array2<f64>,
    provenance: Provenance,
}

impl NuisanceEstimates {
    /// Checks shapes, finiteness, that propensities are non-negative and
    /// that every propensity row sums to one within `1e-9`. Zero entries are
    /// allowed here; the weighting estimators reject a zero at an observed
    /// arm.
    pub fn new(mu_hat: Array2<f64>, p_hat: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if mu_hat.dim() != p_hat.dim() {
            return Err(OplError::InvalidInput(format!(
                "mu_hat is {:?} but p_hat is {:?}",
                mu_hat.dim(),
                p_hat.dim()
            )));
        }
        if mu_hat.iter().any(|v| !v.is_finite()) {
            return Err(OplError::InvalidInput("mu_hat has non-finite entries".into()));
        }
        for (i, row) in p_hat.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(OplError::InvalidInput(format!("p_hat row {i} has a negative entry")));
            }
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(OplError::InvalidInput(format!("p_hat row {i} does not sum to one")));
            }
        }
        Ok(Self {
            mu_hat,
            p_hat,
            provenance,
        })
    }

    /// Batch predictions of two fitted models on `features`.
    pub fn from_models(
        features: &Array2<f64>,
        means: &ConditionalMeanModel,
        propensity: &PropensityModel,
    ) -> Result<Self> {
        Self::new(
            means.predict_matrix(features),
            propensity.predict_matrix(features),
            Provenance::Batch,
        )
    }

    pub fn mu_hat(&self) -> &Array2<f64> {
        &self.mu_hat
    }

    pub fn p_hat(&self) -> &Array2<f64> {
        &self.p_hat
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.mu_hat.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_hat.nrows() == 0
    }

    pub fn arms(&self) -> usize {
        self.mu_hat.ncols()
    }

    /// Replaces the conditional means, keeping the propensities.
    pub fn with_mu(&self, mu_hat: Array2<f64>) -> Result<Self> {
        Self::new(mu_hat, self.p_hat.clone(), Provenance::Supplied)
    }

    /// Replaces the propensities, keeping the conditional means.
    pub fn with_p(&self, p_hat: Array2<f64>) -> Result<Self> {
        Self::new(self.mu_hat.clone(), p_hat, Provenance::Supplied)
    }

    pub(crate) fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.len() != data.len() {
            return Err(OplError::LengthMismatch {
                what: "nuisance rows vs dataset",
                left: self.len(),
                right: data.len(),
            });
        }
        if self.arms() != data.arm_count() {
            return Err(OplError::LengthMismatch {
                what: "nuisance arms vs dataset arms",
                left: self.arms(),
                right: data.arm_count(),
            });
        }
        Ok(())
    }

    /// Every unit's propensity at its observed arm must be positive before
    /// it can be used as a weight.
    pub(crate) fn check_observed(&self, data: &Dataset) -> Result<()> {
        self.check_against(data)?;
        for (i, &d) in data.actions().iter().enumerate() {
            if !(self.p_hat[[i, d]] > 0.0) {
                return Err(OplError::Domain(format!("unit {i} has zero propensity at its observed arm {d}")));
            }
        }
        Ok(())
    }
}

/// Learner settings shared by batch and cross-fitted nuisance estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceConfig {
    pub ridge: f64,
    pub mean_basis: Basis,
    pub propensity: PropensityConfig,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            ridge: 0.0,
            mean_basis: Basis::linear(),
            propensity: PropensityConfig::default(),
        }
    }
}

impl NuisanceConfig {
    pub fn new(ridge: f64, p_min: f64) -> Self {
        Self {
            ridge,
            propensity: PropensityConfig {
                floor: p_min,
                ..PropensityConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Fits both nuisance models on `data` and predicts in-sample.
pub fn fit_batch(data: &Dataset, config: &NuisanceConfig) -> Result<NuisanceEstimates> {
    let means = fit_conditional_means_with(data, config.ridge, &config.mean_basis)?;
    let propensity = fit_propensity_with(data, &config.propensity)?;
    NuisanceEstimates::from_models(data.features(), &means, &propensity)
}
