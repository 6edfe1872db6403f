//! Synthetic data-generating process with known ground truth.
//!
//! Features are independent `uniform(-1, 1)`. Arm `j` has conditional mean
//!
//! ```text
//! mu_j(x) = a_j + b_j . x + c_j * x1^2
//! ```
//!
//! and is assigned with multinomial-logistic probabilities, mixed with the
//! uniform distribution just enough that every propensity stays above the
//! configured overlap floor. A hidden confounder `u ~ uniform(-1, 1)` can
//! shift both the assignment scores (arm-specific loading) and every reward
//! (common loading), which breaks unconfoundedness when `u` is not observed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{OplError, Result};
use crate::policy::PolicySpec;

/// Reward noise around the conditional mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `Var(Y | x) = sd^2`.
    Homoskedastic { sd: f64 },
    /// `Var(Y | x) = sd^2 * (1 + x1^2)`.
    Heteroskedastic { sd: f64 },
}

impl NoiseModel {
    pub fn variance(&self, x: &[f64]) -> f64 {
        match *self {
            NoiseModel::Homoskedastic { sd } => sd * sd,
            NoiseModel::Heteroskedastic { sd } => sd * sd * (1.0 + x[0] * x[0]),
        }
    }

    fn sd(&self) -> f64 {
        match *self {
            NoiseModel::Homoskedastic { sd } | NoiseModel::Heteroskedastic { sd } => sd,
        }
    }
}

/// Every coefficient of the generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpCoefficients {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<Vec<f64>>,
    /// Coefficient on `x1^2`, per arm.
    pub curvature: Vec<f64>,
    /// Assignment score intercepts; arm 0 is the reference and should be 0.
    pub score_intercepts: Vec<f64>,
    pub score_slopes: Vec<Vec<f64>>,
    /// Loading of the hidden confounder on each arm's assignment score.
    pub confounder_loadings: Vec<f64>,
}

impl DgpCoefficients {
    /// Reference draw: `a_j, b_jk ~ U(-1, 1)`, `c_j ~ U(-1.5, 1.5)`,
    /// score coefficients `~ U(-0.5, 0.5)` with arm 0 as reference, and
    /// confounder loading `j` on arm `j`.
    pub fn draw(arms: usize, n_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |half: f64| rng.random_range(-half..half);
        let intercepts = (0..arms).map(|_| uniform(1.0)).collect();
        let slopes = (0..arms)
            .map(|_| (0..n_features).map(|_| uniform(1.0)).collect())
            .collect();
        let curvature = (0..arms).map(|_| uniform(1.5)).collect();
        let mut score_intercepts = vec![0.0];
        let mut score_slopes = vec![vec![0.0; n_features]];
        for _ in 1..arms {
            score_intercepts.push(uniform(0.5));
            score_slopes.push((0..n_features).map(|_| uniform(0.5)).collect());
        }
        Self {
            intercepts,
            slopes,
            curvature,
            score_intercepts,
            score_slopes,
            confounder_loadings: (0..arms).map(|j| j as f64).collect(),
        }
    }

    pub fn arms(&self) -> usize {
        self.intercepts.len()
    }

    fn validate(&self, arms: usize, n_features: usize) -> Result<()> {
        let ok = self.intercepts.len() == arms
            && self.curvature.len() == arms
            && self.score_intercepts.len() == arms
            && self.confounder_loadings.len() == arms
            && self.slopes.len() == arms
            && self.score_slopes.len() == arms
            && self.slopes.iter().all(|s| s.len() == n_features)
            && self.score_slopes.iter().all(|s| s.len() == n_features);
        if ok {
            Ok(())
        } else {
            Err(OplError::InvalidInput(format!(
                "coefficients do not match {arms} arms and {n_features} features"
            )))
        }
    }
}

/// Parameters of one synthetic draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub n: usize,
    pub n_features: usize,
    /// `J + 1`.
    pub arms: usize,
    pub coefficient_seed: u64,
    pub noise: NoiseModel,
    /// Minimum true propensity; 0 disables the uniform mixing.
    pub overlap_floor: f64,
    /// Weight `gamma_c` of the hidden confounder.
    pub confounder_strength: f64,
    /// Append `u` as the last feature column.
    pub reveal_confounder: bool,
    /// Explicit coefficients; drawn from `coefficient_seed` when `None`.
    pub coefficients: Option<DgpCoefficients>,
}

impl DgpSpec {
    /// Three arms, five features, unit noise, floor 0.05, no confounding.
    pub fn reference(n: usize) -> Self {
        Self {
            n,
            n_features: 5,
            arms: 3,
            coefficient_seed: 2024,
            noise: NoiseModel::Homoskedastic { sd: 1.0 },
            overlap_floor: 0.05,
            confounder_strength: 0.0,
            reveal_confounder: false,
            coefficients: None,
        }
    }

    pub fn resolved_coefficients(&self) -> DgpCoefficients {
        self.coefficients
            .clone()
            .unwrap_or_else(|| DgpCoefficients::draw(self.arms, self.n_features, self.coefficient_seed))
    }
}

/// Ground truth for a [`DgpSpec`]. Functions take *observed* feature rows,
/// which include `u` as the last column when it is revealed.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    coefficients: DgpCoefficients,
    n_features: usize,
    noise: NoiseModel,
    confounder_strength: f64,
    reveal_confounder: bool,
    overlap_floor: f64,
    mixing: f64,
}

impl SyntheticTruth {
    pub fn new(spec: &DgpSpec) -> Result<Self> {
        if spec.arms < 2 {
            return Err(OplError::InvalidInput("at least two arms are required".into()));
        }
        if spec.n_features == 0 {
            return Err(OplError::InvalidInput("at least one feature is required".into()));
        }
        if !(spec.noise.sd() >= 0.0) {
            return Err(OplError::InvalidInput("noise sd must be non-negative".into()));
        }
        if !(spec.confounder_strength >= 0.0) {
            return Err(OplError::InvalidInput("confounder strength must be non-negative".into()));
        }
        let max_floor = 1.0 / spec.arms as f64;
        if !(spec.overlap_floor >= 0.0) || spec.overlap_floor > max_floor {
            return Err(OplError::InfeasibleFloor {
                floor: spec.overlap_floor,
                arms: spec.arms,
                max: max_floor,
            });
        }
        let coefficients = spec.resolved_coefficients();
        coefficients.validate(spec.arms, spec.n_features)?;
        let mut truth = Self {
            coefficients,
            n_features: spec.n_features,
            noise: spec.noise,
            confounder_strength: spec.confounder_strength,
            reveal_confounder: spec.reveal_confounder,
            overlap_floor: spec.overlap_floor,
            mixing: 0.0,
        };
        truth.mixing = truth.mixing_weight()?;
        Ok(truth)
    }

    pub fn arms(&self) -> usize {
        self.coefficients.arms()
    }

    pub fn coefficients(&self) -> &DgpCoefficients {
        &self.coefficients
    }

    pub fn overlap_floor(&self) -> f64 {
        self.overlap_floor
    }

    /// Weight on the uniform distribution in the propensity mixture.
    pub fn mixing(&self) -> f64 {
        self.mixing
    }

    pub fn confounder_strength(&self) -> f64 {
        self.confounder_strength
    }

    /// Width of an observed feature row.
    pub fn observed_width(&self) -> usize {
        self.n_features + usize::from(self.reveal_confounder)
    }

    fn latent_mean(&self, arm: usize, x: &[f64]) -> f64 {
        let c = &self.coefficients;
        c.intercepts[arm]
            + c.slopes[arm].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
            + c.curvature[arm] * x[0] * x[0]
    }

    /// `E[Y(arm) | observed row]`.
    pub fn mu(&self, arm: usize, row: &[f64]) -> f64 {
        let base = self.latent_mean(arm, &row[..self.n_features]);
        if self.reveal_confounder {
            base + self.confounder_strength * row[self.n_features]
        } else {
            base
        }
    }

    pub fn mu_row(&self, row: &[f64]) -> Vec<f64> {
        (0..self.arms()).map(|j| self.mu(j, row)).collect()
    }

    pub fn noise_variance(&self, row: &[f64]) -> f64 {
        self.noise.variance(&row[..self.n_features])
    }

    /// Assignment probabilities given the latent features and `u`.
    pub fn assignment_probabilities(&self, x: &[f64], u: f64) -> Vec<f64> {
        let raw = self.logistic(x, u);
        let uniform = 1.0 / self.arms() as f64;
        raw.iter().map(|p| (1.0 - self.mixing) * p + self.mixing * uniform).collect()
    }

    fn logistic(&self, x: &[f64], u: f64) -> Vec<f64> {
        let c = &self.coefficients;
        let scores: Vec<f64> = (0..self.arms())
            .map(|j| {
                c.score_intercepts[j]
                    + c.score_slopes[j].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    + self.confounder_strength * c.confounder_loadings[j] * u
            })
            .collect();
        softmax(&scores)
    }

    /// `P(D = j | observed row)`; integrates `u` out when it is hidden.
    pub fn propensity(&self, row: &[f64]) -> Vec<f64> {
        let x = &row[..self.n_features];
        if self.reveal_confounder {
            return self.assignment_probabilities(x, row[self.n_features]);
        }
        if self.confounder_strength == 0.0 {
            return self.assignment_probabilities(x, 0.0);
        }
        let mut acc = vec![0.0; self.arms()];
        gauss_legendre_unit(|u| self.assignment_probabilities(x, u), &mut acc);
        acc
    }

    /// First-best arm under the truth; ties go to the lowest index.
    pub fn optimal_arm(&self, row: &[f64]) -> usize {
        argmax(&self.mu_row(row))
    }

    pub fn optimal_policy(&self, features: &Array2<f64>) -> Vec<usize> {
        features
            .rows()
            .into_iter()
            .map(|r| self.optimal_arm(&r.to_vec()))
            .collect()
    }

    pub fn mu_matrix(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((features.nrows(), self.arms()));
        for (i, r) in features.rows().into_iter().enumerate() {
            let row = r.to_vec();
            for j in 0..self.arms() {
                out[[i, j]] = self.mu(j, &row);
            }
        }
        out
    }

    pub fn propensity_matrix(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((features.nrows(), self.arms()));
        for (i, r) in features.rows().into_iter().enumerate() {
            for (j, p) in self.propensity(&r.to_vec()).into_iter().enumerate() {
                out[[i, j]] = p;
            }
        }
        out
    }

    /// `(1/N) sum_i mu_{pi_i}(x_i)`: the value of `assignments` conditional
    /// on the realised features.
    pub fn sample_value(&self, features: &Array2<f64>, assignments: &[usize]) -> f64 {
        let n = features.nrows();
        features
            .rows()
            .into_iter()
            .zip(assignments)
            .map(|(r, &a)| self.mu(a, &r.to_vec()))
            .sum::<f64>()
            / n as f64
    }

    /// Population value `E[Y(pi(x))]` of a threshold rule, in closed form.
    pub fn threshold_value(&self, feature: usize, knots: &[f64]) -> Result<f64> {
        if feature >= self.observed_width() {
            return Err(OplError::InvalidInput(format!("feature {feature} out of range")));
        }
        if knots.len() + 1 != self.arms() {
            return Err(OplError::InvalidInput(format!(
                "{} knots given for {} arms",
                knots.len(),
                self.arms()
            )));
        }
        let mut edges = vec![f64::NEG_INFINITY];
        edges.extend_from_slice(knots);
        edges.push(f64::INFINITY);
        let c = &self.coefficients;
        let mut value = 0.0;
        for arm in 0..self.arms() {
            let lo = edges[arm].clamp(-1.0, 1.0);
            let hi = edges[arm + 1].clamp(-1.0, 1.0);
            if hi <= lo {
                continue;
            }
            let mass = (hi - lo) / 2.0;
            let m1 = (hi * hi - lo * lo) / 4.0;
            let m2 = (hi.powi(3) - lo.powi(3)) / 6.0;
            value += c.intercepts[arm] * mass;
            if feature < self.n_features {
                value += c.slopes[arm][feature] * m1;
                value += if feature == 0 { c.curvature[arm] * m2 } else { c.curvature[arm] * mass / 3.0 };
            } else {
                // threshold on the revealed confounder
                value += c.curvature[arm] * mass / 3.0 + self.confounder_strength * m1;
            }
        }
        Ok(value)
    }

    /// Population value of `policy`: closed form for threshold rules,
    /// quasi-Monte Carlo integration (2^18 Halton points) for first-best
    /// rules. Fixed assignments have no population value.
    pub fn true_value_at(&self, policy: &PolicySpec) -> Result<f64> {
        match policy {
            PolicySpec::Threshold { feature, knots } => self.threshold_value(*feature, knots),
            PolicySpec::FirstBest(model) => Ok(self.integrate_policy(|row| argmax(&model.predict_row(row)), 1 << 18)),
            PolicySpec::Fixed(_) => Err(OplError::InvalidInput(
                "a fixed assignment vector has no population value; use sample_value".into(),
            )),
        }
    }

    /// Value of the true first-best rule, by quasi-Monte Carlo.
    pub fn optimal_value(&self, points: usize) -> f64 {
        self.integrate_policy(|row| self.optimal_arm(row), points)
    }

    /// `E[mu_{rule(x)}(x)]` over the feature distribution using a Halton
    /// sequence of `points` points.
    pub fn integrate_policy<F: Fn(&[f64]) -> usize>(&self, rule: F, points: usize) -> f64 {
        let dim = self.observed_width();
        let mut row = vec![0.0; dim];
        let mut total = 0.0;
        for k in 1..=points {
            for (d, v) in row.iter_mut().enumerate() {
                *v = 2.0 * radical_inverse(k as u64, PRIMES[d % PRIMES.len()]) - 1.0;
            }
            total += self.mu(rule(&row), &row);
        }
        total / points as f64
    }

    /// Mixing weight that makes the floor bind at the worst corner of the
    /// `(x, u)` box. Log-propensities are concave in the scores, so the
    /// minimum over the box sits at a vertex.
    fn mixing_weight(&self) -> Result<f64> {
        if self.overlap_floor == 0.0 {
            return Ok(0.0);
        }
        let with_u = self.confounder_strength > 0.0;
        let dims = self.n_features + usize::from(with_u);
        if dims > 20 {
            return Err(OplError::InvalidInput(
                "overlap flooring supports at most 20 latent dimensions".into(),
            ));
        }
        let mut min_p = f64::INFINITY;
        let mut x = vec![0.0; self.n_features];
        for mask in 0u32..(1u32 << dims) {
            for (k, v) in x.iter_mut().enumerate() {
                *v = if mask & (1 << k) != 0 { 1.0 } else { -1.0 };
            }
            let u = if with_u && mask & (1 << self.n_features) != 0 { 1.0 } else { -1.0 };
            let p = self.logistic(&x, if with_u { u } else { 0.0 });
            min_p = p.iter().copied().fold(min_p, f64::min);
        }
        let uniform = 1.0 / self.arms() as f64;
        if min_p >= self.overlap_floor {
            return Ok(0.0);
        }
        Ok(((self.overlap_floor - min_p) / (uniform - min_p)).clamp(0.0, 1.0))
    }
}

/// Draws a dataset and returns it with its ground truth.
pub fn generate_synthetic(spec: &DgpSpec, rng_seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    if spec.n == 0 {
        return Err(OplError::EmptyDataset);
    }
    let truth = SyntheticTruth::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p = spec.n_features;
    let width = truth.observed_width();
    let mut features = Array2::zeros((spec.n, width));
    let mut actions = Vec::with_capacity(spec.n);
    let mut rewards = Vec::with_capacity(spec.n);
    let mut x = vec![0.0; p];
    for i in 0..spec.n {
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let u: f64 = rng.random_range(-1.0..1.0);
        let probs = truth.assignment_probabilities(&x, u);
        let draw: f64 = rng.random();
        let arm = sample_categorical(&probs, draw);
        let z: f64 = rng.sample(StandardNormal);
        let y = truth.latent_mean(arm, &x) + spec.confounder_strength * u + spec.noise.variance(&x).sqrt() * z;
        for k in 0..p {
            features[[i, k]] = x[k];
        }
        if spec.reveal_confounder {
            features[[i, p]] = u;
        }
        actions.push(arm);
        rewards.push(y);
    }
    let mut names: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
    if spec.reveal_confounder {
        names.push("u".into());
    }
    let dataset = Dataset::new(features, actions, rewards, spec.arms, names)?;
    Ok((dataset, truth))
}

fn sample_categorical(probs: &[f64], draw: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return j;
        }
    }
    probs.len() - 1
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

const PRIMES: [u64; 20] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71];

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * scale;
        k /= base;
        scale *= inv;
    }
    out
}

/// Averages a vector-valued function over `u ~ uniform(-1, 1)` with
/// composite 5-point Gauss-Legendre on 16 panels.
fn gauss_legendre_unit<F: Fn(f64) -> Vec<f64>>(f: F, acc: &mut [f64]) {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    const PANELS: usize = 16;
    let h = 2.0 / PANELS as f64;
    for panel in 0..PANELS {
        let mid = -1.0 + h * (panel as f64 + 0.5);
        for (node, w) in NODES.iter().zip(WEIGHTS) {
            let values = f(mid + 0.5 * h * node);
            // density 1/2 on [-1, 1], panel half-width h/2
            let weight = w * 0.5 * h * 0.5;
            for (a, v) in acc.iter_mut().zip(values) {
                *a += weight * v;
            }
        }
    }
}
