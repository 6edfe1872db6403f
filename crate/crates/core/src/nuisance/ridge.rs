use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use super::Basis;
use crate::data::Dataset;
use crate::error::{OplError, Result};

/// One ridge regression per arm. Coefficient vectors are laid out as
/// `[intercept, slopes...]` over the expanded [`Basis`]; the intercept is
/// never penalised.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMeanModel {
    coefficients: Vec<Vec<f64>>,
    penalty: f64,
    counts: Vec<usize>,
    basis: Basis,
    n_features: usize,
}

/// Ridge fit of the observed reward on the raw features, arm by arm.
pub fn fit_conditional_means(data: &Dataset, penalty: f64) -> Result<ConditionalMeanModel> {
    fit_conditional_means_with(data, penalty, &Basis::linear())
}

pub fn fit_conditional_means_with(data: &Dataset, penalty: f64, basis: &Basis) -> Result<ConditionalMeanModel> {
    ConditionalMeanModel::fit(data, data.rewards(), penalty, basis)
}

impl ConditionalMeanModel {
    /// Per-arm ridge regression of `targets` (aligned with `data`'s units).
    pub fn fit(data: &Dataset, targets: &[f64], penalty: f64, basis: &Basis) -> Result<Self> {
        if !(penalty >= 0.0) || !penalty.is_finite() {
            return Err(OplError::InvalidInput(format!("ridge penalty {penalty} must be >= 0")));
        }
        if targets.len() != data.len() {
            return Err(OplError::LengthMismatch {
                what: "targets vs dataset",
                left: targets.len(),
                right: data.len(),
            });
        }
        basis.validate(data.n_features())?;
        let width = basis.width(data.n_features());
        let counts = data.arm_counts();
        for (arm, &count) in counts.iter().enumerate() {
            if count == 0 {
                return Err(OplError::MissingArm(arm));
            }
            if penalty == 0.0 && count < width + 2 {
                return Err(OplError::InsufficientArmData {
                    arm,
                    count,
                    required: width + 2,
                });
            }
        }

        let mut designs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); data.arm_count()];
        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); data.arm_count()];
        for i in 0..data.len() {
            let arm = data.actions()[i];
            designs[arm].push(basis.expand(data.row(i)));
            ys[arm].push(targets[i]);
        }
        let coefficients = designs
            .iter()
            .zip(&ys)
            .map(|(x, y)| solve_ridge(x, y, width, penalty))
            .collect();
        Ok(Self {
            coefficients,
            penalty,
            counts,
            basis: basis.clone(),
            n_features: data.n_features(),
        })
    }

    pub fn arms(&self) -> usize {
        self.coefficients.len()
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// `[intercept, slopes...]` for `arm`.
    pub fn coefficients(&self, arm: usize) -> &[f64] {
        &self.coefficients[arm]
    }

    pub fn predict(&self, arm: usize, row: &[f64]) -> f64 {
        let z = self.basis.expand(row);
        linear(&self.coefficients[arm], &z)
    }

    pub fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        let z = self.basis.expand(row);
        self.coefficients.iter().map(|c| linear(c, &z)).collect()
    }

    pub fn predict_matrix(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((features.nrows(), self.arms()));
        let mut z = Vec::new();
        for (i, r) in features.rows().into_iter().enumerate() {
            self.basis.expand_into(&r.to_vec(), &mut z);
            for (j, c) in self.coefficients.iter().enumerate() {
                out[[i, j]] = linear(c, &z);
            }
        }
        out
    }

    /// One stochastic-gradient step on the squared error of a new
    /// observation for `arm`. The arm's count is incremented; all other arms
    /// are left untouched. On error the model is unchanged.
    pub fn update_incremental(&mut self, row: &[f64], arm: usize, reward: f64, step: f64) -> Result<()> {
        self.sgd_step(row, arm, reward, step)?;
        self.counts[arm] += 1;
        Ok(())
    }

    /// Gradient step without counting the observation (used for sweeps
    /// over already-seen data). The ridge penalty is shared evenly across
    /// the arm's observations.
    ///
    /// The step scales the observation's own residual by
    /// `1 - step * (1 + |z|^2)`, so steps with `step * (1 + |z|^2) > 2` make
    /// it grow and are rejected.
    pub(crate) fn sgd_step(&mut self, row: &[f64], arm: usize, reward: f64, step: f64) -> Result<()> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(OplError::InvalidInput(format!("step size {step} must be positive")));
        }
        if arm >= self.arms() {
            return Err(OplError::InvalidInput(format!("arm {arm} out of range")));
        }
        if row.len() != self.n_features {
            return Err(OplError::LengthMismatch {
                what: "feature vector",
                left: row.len(),
                right: self.n_features,
            });
        }
        let z = self.basis.expand(row);
        let gain = step * (1.0 + z.iter().map(|v| v * v).sum::<f64>());
        if gain > 2.0 {
            return Err(OplError::RejectedUpdate {
                arm,
                reason: format!(
                    "step {step} overshoots on a row with squared norm {:.3e}; standardize the features or lower the step",
                    gain / step
                ),
            });
        }
        let coef = &self.coefficients[arm];
        let residual = reward - linear(coef, &z);
        let shrink = self.penalty / (self.counts[arm].max(1) as f64);
        let mut next = coef.clone();
        next[0] += step * residual;
        for k in 0..z.len() {
            next[k + 1] += step * (residual * z[k] - shrink * coef[k + 1]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OplError::RejectedUpdate {
                arm,
                reason: format!("non-finite gradient (residual {residual}, step {step})"),
            });
        }
        self.coefficients[arm] = next;
        Ok(())
    }

    /// Plain-text coefficient listing, one line per arm.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# conditional-mean model (ridge, per arm)\n");
        out.push_str(&format!("penalty={}\n", self.penalty));
        out.push_str(&format!("features={}\n", self.n_features));
        out.push_str(&format!("basis={}\n", self.basis.to_text()));
        for (arm, coef) in self.coefficients.iter().enumerate() {
            let c: Vec<String> = coef.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("arm={arm} count={} coef={}\n", self.counts[arm], c.join(",")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut penalty = None;
        let mut n_features = None;
        let mut basis = None;
        let mut coefficients = Vec::new();
        let mut counts = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some(v) = line.strip_prefix("penalty=") {
                penalty = Some(parse_f64(v)?);
            } else if let Some(v) = line.strip_prefix("features=") {
                n_features = Some(v.parse().map_err(|_| bad_line(line))?);
            } else if let Some(v) = line.strip_prefix("basis=") {
                basis = Some(Basis::from_text(v)?);
            } else if line.starts_with("arm=") {
                let mut arm = None;
                let mut count = None;
                let mut coef = None;
                for field in line.split_whitespace() {
                    match field.split_once('=') {
                        Some(("arm", v)) => arm = v.parse::<usize>().ok(),
                        Some(("count", v)) => count = v.parse::<usize>().ok(),
                        Some(("coef", v)) => coef = Some(v.split(',').map(parse_f64).collect::<Result<Vec<_>>>()?),
                        _ => return Err(bad_line(line)),
                    }
                }
                let (arm, count, coef) = match (arm, count, coef) {
                    (Some(a), Some(c), Some(k)) => (a, c, k),
                    _ => return Err(bad_line(line)),
                };
                if arm != coefficients.len() {
                    return Err(bad_line(line));
                }
                coefficients.push(coef);
                counts.push(count);
            } else {
                return Err(bad_line(line));
            }
        }
        let (penalty, n_features, basis) = match (penalty, n_features, basis) {
            (Some(p), Some(n), Some(b)) => (p, n, b),
            _ => return Err(OplError::InvalidInput("model text lacks penalty/features/basis".into())),
        };
        let width = basis.width(n_features);
        if coefficients.len() < 2 || coefficients.iter().any(|c| c.len() != width + 1) {
            return Err(OplError::InvalidInput("coefficient vectors do not match the basis".into()));
        }
        Ok(Self {
            coefficients,
            penalty,
            counts,
            basis,
            n_features,
        })
    }
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| OplError::InvalidInput(format!("`{s}` is not a number")))
}

fn bad_line(line: &str) -> OplError {
    OplError::InvalidInput(format!("unrecognised model line `{line}`"))
}

fn linear(coef: &[f64], z: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
}

/// Centred closed-form ridge: slopes solve `(Xc'Xc + lambda I) b = Xc'yc`,
/// intercept `ybar - xbar'b`. Falls back to a minimum-norm SVD solve when
/// the system is singular.
fn solve_ridge(x: &[Vec<f64>], y: &[f64], width: usize, penalty: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut x_mean = vec![0.0; width];
    for row in x {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    if width == 0 {
        return vec![y_mean];
    }
    let mut gram = DMatrix::<f64>::zeros(width, width);
    let mut rhs = DVector::<f64>::zeros(width);
    let mut centred = vec![0.0; width];
    for (row, &yi) in x.iter().zip(y) {
        for k in 0..width {
            centred[k] = row[k] - x_mean[k];
        }
        let yc = yi - y_mean;
        for a in 0..width {
            rhs[a] += centred[a] * yc;
            for b in a..width {
                gram[(a, b)] += centred[a] * centred[b];
            }
        }
    }
    for a in 0..width {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += penalty;
    }
    let slopes = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(width)),
    };
    let intercept = y_mean - x_mean.iter().zip(slopes.iter()).map(|(m, b)| m * b).sum::<f64>();
    std::iter::once(intercept).chain(slopes.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DgpCoefficients, DgpSpec, NoiseModel};

    fn noiseless(seed: u64, n: usize) -> (Dataset, DgpCoefficients) {
        let mut spec = DgpSpec::reference(n);
        spec.noise = NoiseModel::Homoskedastic { sd: 0.0 };
        let coef = spec.resolved_coefficients();
        let (data, _) = generate_synthetic(&spec, seed).unwrap();
        (data, coef)
    }

    #[test]
    fn constant_rewards_give_intercepts() {
        let (data, _) = noiseless(1, 200);
        let rewards: Vec<f64> = data.actions().iter().map(|&a| 10.0 * a as f64 - 3.0).collect();
        let data = data.with_rewards(rewards).unwrap();
        let model = fit_conditional_means(&data, 0.0).unwrap();
        for arm in 0..3 {
            let c = model.coefficients(arm);
            assert!((c[0] - (10.0 * arm as f64 - 3.0)).abs() < 1e-9);
            assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn noiseless_dgp_recovers_generating_coefficients() {
        let (data, coef) = noiseless(2, 400);
        let model = fit_conditional_means_with(&data, 0.0, &Basis::with_squares(vec![0])).unwrap();
        for arm in 0..3 {
            let c = model.coefficients(arm);
            assert!((c[0] - coef.intercepts[arm]).abs() < 1e-8);
            for k in 0..5 {
                assert!((c[k + 1] - coef.slopes[arm][k]).abs() < 1e-8);
            }
            assert!((c[6] - coef.curvature[arm]).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_penalty_shrinks_to_arm_mean() {
        let (data, _) = noiseless(3, 300);
        let model = fit_conditional_means(&data, 1e12).unwrap();
        for arm in 0..3 {
            let ys: Vec<f64> = (0..data.len())
                .filter(|&i| data.actions()[i] == arm)
                .map(|i| data.rewards()[i])
                .collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let c = model.coefficients(arm);
            assert!(c[1..].iter().all(|v| v.abs() < 1e-8));
            assert!((c[0] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_arm_is_named() {
        let (data, _) = noiseless(4, 100);
        let keep: Vec<usize> = (0..data.len()).filter(|&i| data.actions()[i] != 1).collect();
        let sub = data.subset(&keep).unwrap();
        assert!(matches!(fit_conditional_means(&sub, 1.0), Err(OplError::MissingArm(1))));
    }

    #[test]
    fn too_few_observations_without_penalty() {
        let (data, _) = noiseless(5, 12);
        let err = fit_conditional_means(&data, 0.0).unwrap_err();
        assert!(matches!(err, OplError::InsufficientArmData { required: 7, .. }));
        assert!(fit_conditional_means(&data, 0.5).is_ok());
    }

    #[test]
    fn incremental_update_isolated_to_arm() {
        let (data, _) = noiseless(6, 200);
        let mut model = fit_conditional_means(&data, 0.0).unwrap();
        let before = model.clone();
        model.update_incremental(data.row(0), 1, 5.0, 0.1).unwrap();
        assert_eq!(model.coefficients(0), before.coefficients(0));
        assert_eq!(model.coefficients(2), before.coefficients(2));
        assert_ne!(model.coefficients(1), before.coefficients(1));
        assert_eq!(model.counts()[1], before.counts()[1] + 1);
    }

    #[test]
    fn incremental_update_rejections() {
        let (data, _) = noiseless(7, 200);
        let mut model = fit_conditional_means(&data, 0.0).unwrap();
        let before = model.clone();
        assert!(model.update_incremental(data.row(0), 0, 1.0, 0.0).is_err());
        assert!(model.update_incremental(data.row(0), 0, f64::INFINITY, 0.1).is_err());
        assert!(model.update_incremental(data.row(0), 0, 1e308, 1e308).is_err());
        let wide: Vec<f64> = data.row(0).iter().map(|v| v * 1e3).collect();
        let err = model.update_incremental(&wide, 0, 1.0, 0.05).unwrap_err();
        assert!(matches!(err, OplError::RejectedUpdate { arm: 0, .. }), "{err}");
        assert_eq!(model, before);
    }

    #[test]
    fn text_round_trip() {
        let (data, _) = noiseless(8, 200);
        let model = fit_conditional_means_with(&data, 0.25, &Basis::with_squares(vec![0, 2])).unwrap();
        let back = ConditionalMeanModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back, model);
    }
}
