use ndarray::Array2;

use super::ridge::parse_f64;
use super::Basis;
use crate::data::synthetic::softmax;
use crate::data::Dataset;
use crate::error::{OplError, Result};

/// Settings for the multinomial logistic propensity fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityConfig {
    /// Trimming floor `p_min`; must lie in `(0, 1/(J+1))`.
    pub floor: f64,
    pub basis: Basis,
    /// L2 penalty on the (standardised) slopes. Keeps separable data finite.
    pub l2: f64,
    /// Convergence when the max-norm of the gradient drops below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            floor: 0.01,
            basis: Basis::linear(),
            l2: 1e-4,
            tolerance: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Reference-coded multinomial logistic model: arm 0 has score zero, arm
/// `j >= 1` scores `w_j0 + w_j'z` where `z` is the standardised basis
/// expansion of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    coefficients: Vec<Vec<f64>>,
    centre: Vec<f64>,
    scale: Vec<f64>,
    floor: f64,
    basis: Basis,
    n_features: usize,
    iterations: usize,
    grad_norm: f64,
}

pub fn fit_propensity(data: &Dataset, p_min: f64) -> Result<PropensityModel> {
    fit_propensity_with(
        data,
        &PropensityConfig {
            floor: p_min,
            ..PropensityConfig::default()
        },
    )
}

pub fn fit_propensity_with(data: &Dataset, config: &PropensityConfig) -> Result<PropensityModel> {
    let arms = data.arm_count();
    if !(config.floor > 0.0) || config.floor >= 1.0 / arms as f64 {
        return Err(OplError::InfeasibleFloor {
            floor: config.floor,
            arms,
            max: 1.0 / arms as f64,
        });
    }
    if !(config.l2 >= 0.0) || !(config.tolerance > 0.0) {
        return Err(OplError::InvalidInput("l2 must be >= 0 and tolerance > 0".into()));
    }
    data.require_all_arms()?;
    config.basis.validate(data.n_features())?;

    let width = config.basis.width(data.n_features());
    let n = data.len();
    let mut design = Vec::with_capacity(n * width);
    let mut z = Vec::new();
    for i in 0..n {
        config.basis.expand_into(data.row(i), &mut z);
        design.extend_from_slice(&z);
    }
    let (centre, scale) = column_moments(&design, n, width);
    for (k, v) in design.iter_mut().enumerate() {
        let c = k % width;
        *v = (*v - centre[c]) / scale[c];
    }

    let problem = Problem {
        design: &design,
        actions: data.actions(),
        arms,
        width,
        l2: config.l2,
    };
    let counts = data.arm_counts();
    let stride = width + 1;
    let mut theta = vec![0.0; (arms - 1) * stride];
    for j in 1..arms {
        theta[(j - 1) * stride] = (counts[j] as f64 / counts[0] as f64).ln();
    }

    let (mut f, mut grad) = problem.evaluate(&theta);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut norm = max_norm(&grad);
    while norm >= config.tolerance {
        if iterations >= config.max_iter {
            return Err(OplError::Convergence {
                iterations,
                grad_norm: norm,
            });
        }
        iterations += 1;
        let sq: f64 = grad.iter().map(|g| g * g).sum();
        let mut t = step;
        let (next, f_next, g_next) = loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(a, g)| a + t * g).collect();
            let (fc, gc) = problem.evaluate(&cand);
            if fc >= f + 1e-4 * t * sq || t < 1e-20 {
                break (cand, fc, gc);
            }
            t *= 0.5;
        };
        // Barzilai-Borwein length for the next trial step.
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..theta.len() {
            let s = next[k] - theta[k];
            let y = g_next[k] - grad[k];
            ss += s * s;
            sy -= s * y;
        }
        step = if sy > 0.0 && ss > 0.0 { (ss / sy).min(1e6) } else { 1.0 };
        if f_next == f && next == theta {
            norm = max_norm(&g_next);
            if norm >= config.tolerance {
                return Err(OplError::Convergence {
                    iterations,
                    grad_norm: norm,
                });
            }
        }
        theta = next;
        f = f_next;
        grad = g_next;
        norm = max_norm(&grad);
    }

    let coefficients = (0..arms)
        .map(|j| {
            if j == 0 {
                vec![0.0; stride]
            } else {
                theta[(j - 1) * stride..j * stride].to_vec()
            }
        })
        .collect();
    Ok(PropensityModel {
        coefficients,
        centre,
        scale,
        floor: config.floor,
        basis: config.basis.clone(),
        n_features: data.n_features(),
        iterations,
        grad_norm: norm,
    })
}

struct Problem<'a> {
    design: &'a [f64],
    actions: &'a [usize],
    arms: usize,
    width: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Penalised mean log-likelihood and its gradient.
    fn evaluate(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.actions.len();
        let stride = self.width + 1;
        let mut grad = vec![0.0; theta.len()];
        let mut ll = 0.0;
        let mut scores = vec![0.0; self.arms];
        for (i, &d) in self.actions.iter().enumerate() {
            let z = &self.design[i * self.width..(i + 1) * self.width];
            for j in 1..self.arms {
                let w = &theta[(j - 1) * stride..j * stride];
                scores[j] = w[0] + w[1..].iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            ll += scores[d] - lse;
            for j in 1..self.arms {
                let r = f64::from(u8::from(d == j)) - (scores[j] - lse).exp();
                let g = &mut grad[(j - 1) * stride..j * stride];
                g[0] += r;
                for k in 0..self.width {
                    g[k + 1] += r * z[k];
                }
            }
        }
        let inv = 1.0 / n as f64;
        let mut penalty = 0.0;
        for j in 1..self.arms {
            for k in 0..stride {
                let idx = (j - 1) * stride + k;
                grad[idx] *= inv;
                if k > 0 {
                    penalty += theta[idx] * theta[idx];
                    grad[idx] -= self.l2 * theta[idx];
                }
            }
        }
        (ll * inv - 0.5 * self.l2 * penalty, grad)
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn column_moments(design: &[f64], n: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut centre = vec![0.0; width];
    let mut scale = vec![0.0; width];
    for i in 0..n {
        for k in 0..width {
            centre[k] += design[i * width + k] / n as f64;
        }
    }
    for i in 0..n {
        for k in 0..width {
            let d = design[i * width + k] - centre[k];
            scale[k] += d * d / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (centre, scale)
}

/// Mixes `p` with the uniform distribution just enough for every entry to
/// reach `floor`. Rows already above the floor are returned unchanged.
pub fn apply_floor(p: &mut [f64], floor: f64) {
    let uniform = 1.0 / p.len() as f64;
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= floor || min >= uniform {
        return;
    }
    let lambda = ((floor - min) / (uniform - min)).clamp(0.0, 1.0);
    for v in p.iter_mut() {
        *v = (1.0 - lambda) * *v + lambda * uniform;
    }
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
}

impl PropensityModel {
    pub fn arms(&self) -> usize {
        self.coefficients.len()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_norm
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Coefficients on the standardised basis; arm 0 is the zero vector.
    pub fn coefficients(&self, arm: usize) -> &[f64] {
        &self.coefficients[arm]
    }

    /// Logistic probabilities before trimming.
    pub fn predict_raw(&self, row: &[f64]) -> Vec<f64> {
        let z = self.basis.expand(row);
        let scores: Vec<f64> = self
            .coefficients
            .iter()
            .map(|w| {
                w[0] + z
                    .iter()
                    .enumerate()
                    .map(|(k, v)| w[k + 1] * (v - self.centre[k]) / self.scale[k])
                    .sum::<f64>()
            })
            .collect();
        softmax(&scores)
    }

    /// Trimmed probabilities: every entry at least the floor, summing to 1.
    pub fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        let mut p = self.predict_raw(row);
        apply_floor(&mut p, self.floor);
        p
    }

    pub fn predict_matrix(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((features.nrows(), self.arms()));
        for (i, r) in features.rows().into_iter().enumerate() {
            let p = self.predict_row(&r.to_vec());
            for (j, v) in p.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::from("# propensity model (multinomial logistic, arm 0 reference)\n");
        out.push_str(&format!("floor={}\n", self.floor));
        out.push_str(&format!("features={}\n", self.n_features));
        out.push_str(&format!("basis={}\n", self.basis.to_text()));
        out.push_str(&format!("centre={}\n", list(&self.centre)));
        out.push_str(&format!("scale={}\n", list(&self.scale)));
        out.push_str(&format!("iterations={} grad_norm={}\n", self.iterations, self.grad_norm));
        for (arm, w) in self.coefficients.iter().enumerate() {
            out.push_str(&format!("arm={arm} coef={}\n", list(w)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let list = |v: &str| -> Result<Vec<f64>> {
            if v.is_empty() {
                Ok(Vec::new())
            } else {
                v.split(',').map(parse_f64).collect()
            }
        };
        let bad = |l: &str| OplError::InvalidInput(format!("unrecognised model line `{l}`"));
        let mut floor = None;
        let mut n_features = None;
        let mut basis = None;
        let mut centre = None;
        let mut scale = None;
        let mut iterations = 0;
        let mut grad_norm = 0.0;
        let mut coefficients = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some(v) = line.strip_prefix("floor=") {
                floor = Some(parse_f64(v)?);
            } else if let Some(v) = line.strip_prefix("features=") {
                n_features = Some(v.parse::<usize>().map_err(|_| bad(line))?);
            } else if let Some(v) = line.strip_prefix("basis=") {
                basis = Some(Basis::from_text(v)?);
            } else if let Some(v) = line.strip_prefix("centre=") {
                centre = Some(list(v)?);
            } else if let Some(v) = line.strip_prefix("scale=") {
                scale = Some(list(v)?);
            } else if line.starts_with("iterations=") {
                for field in line.split_whitespace() {
                    match field.split_once('=') {
                        Some(("iterations", v)) => iterations = v.parse().map_err(|_| bad(line))?,
                        Some(("grad_norm", v)) => grad_norm = parse_f64(v)?,
                        _ => return Err(bad(line)),
                    }
                }
            } else if let Some(rest) = line.strip_prefix("arm=") {
                let (idx, coef) = rest.split_once(" coef=").ok_or_else(|| bad(line))?;
                if idx.parse::<usize>().ok() != Some(coefficients.len()) {
                    return Err(bad(line));
                }
                coefficients.push(list(coef)?);
            } else {
                return Err(bad(line));
            }
        }
        match (floor, n_features, basis, centre, scale) {
            (Some(floor), Some(n_features), Some(basis), Some(centre), Some(scale)) => {
                let width = basis.width(n_features);
                if centre.len() != width
                    || scale.len() != width
                    || coefficients.len() < 2
                    || coefficients.iter().any(|c| c.len() != width + 1)
                {
                    return Err(OplError::InvalidInput("propensity coefficients do not match the basis".into()));
                }
                Ok(Self {
                    coefficients,
                    centre,
                    scale,
                    floor,
                    basis,
                    n_features,
                    iterations,
                    grad_norm,
                })
            }
            _ => Err(OplError::InvalidInput("propensity model text is incomplete".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(x: Vec<f64>, p: usize, actions: Vec<usize>, arms: usize) -> Dataset {
        let n = actions.len();
        let features = Array2::from_shape_vec((n, p), x).unwrap();
        let names = (0..p).map(|k| format!("x{k}")).collect();
        Dataset::new(features, actions, vec![0.0; n], arms, names).unwrap()
    }

    #[test]
    fn constant_feature_gives_empirical_shares() {
        let actions: Vec<usize> = (0..100).map(|i| if i < 50 { 0 } else if i < 80 { 1 } else { 2 }).collect();
        let data = dataset(vec![0.0; 100], 1, actions, 3);
        let model = fit_propensity(&data, 0.01).unwrap();
        let p = model.predict_row(&[0.0]);
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!((p[1] - 0.3).abs() < 1e-6);
        assert!((p[2] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn uniform_assignment_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let data = dataset(x, 2, actions, 3);
        let model = fit_propensity(&data, 0.01).unwrap();
        let p = model.predict_matrix(data.features());
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 0.02));
    }

    #[test]
    fn separable_assignment_saturates_at_floor() {
        let n = 300;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 3.0).collect();
        let actions: Vec<usize> = x.iter().map(|&v| v.floor() as usize).collect();
        let data = dataset(x, 1, actions, 3);
        let model = fit_propensity(&data, 0.02).unwrap();
        let p = model.predict_row(&[0.1]);
        assert!((p.iter().cloned().fold(1.0, f64::min) - 0.02).abs() < 1e-12);
        assert!(p[0] <= 1.0 - 2.0 * 0.02 + 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floor_must_be_feasible() {
        let data = dataset(vec![0.0; 4], 1, vec![0, 1, 0, 1], 2);
        assert!(matches!(fit_propensity(&data, 0.5), Err(OplError::InfeasibleFloor { .. })));
        assert!(matches!(fit_propensity(&data, 0.0), Err(OplError::InfeasibleFloor { .. })));
    }

    #[test]
    fn iteration_cap_reports_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = x.iter().map(|&v| usize::from(v + rng.random_range(-0.5..0.5) > 0.0)).collect();
        let data = dataset(x, 1, actions, 2);
        let config = PropensityConfig {
            max_iter: 1,
            tolerance: 1e-14,
            ..PropensityConfig::default()
        };
        match fit_propensity_with(&data, &config) {
            Err(OplError::Convergence { iterations, grad_norm }) => {
                assert_eq!(iterations, 1);
                assert!(grad_norm > 0.0);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn floor_mixing() {
        let mut p = vec![0.001, 0.199, 0.8];
        apply_floor(&mut p, 0.01);
        assert!((p[0] - 0.01).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut q = vec![0.2, 0.3, 0.5];
        apply_floor(&mut q, 0.01);
        assert_eq!(q, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
        let data = dataset(x, 2, actions, 3);
        let model = fit_propensity(&data, 0.05).unwrap();
        let back = PropensityModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back, model);
    }
}
