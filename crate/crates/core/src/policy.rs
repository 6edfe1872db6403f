//! Policies, the first-best rule, exhaustive threshold search and
//! cross-fitted doubly robust policy learning.

use std::io::Write;

use ndarray::Array2;

use crate::data::synthetic::argmax;
use crate::data::Dataset;
use crate::error::{OplError, Result};
use crate::nuisance::{cross_fit_with, ConditionalMeanModel, FoldPlan, NuisanceConfig, NuisanceEstimates};
use crate::value::{score_matrix, Estimator};

/// A deterministic map from features to arms.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// Arm = number of knots strictly below `x[feature]`, so a unit sitting
    /// exactly on a knot takes the lower arm.
    Threshold { feature: usize, knots: Vec<f64> },
    /// Per-unit argmax of a fitted model's predictions.
    FirstBest(ConditionalMeanModel),
    /// One arm per unit, in dataset order.
    Fixed(Vec<usize>),
}

impl PolicySpec {
    pub fn threshold(feature: usize, knots: Vec<f64>) -> Result<Self> {
        if knots.is_empty() {
            return Err(OplError::InvalidInput("a threshold rule needs at least one knot".into()));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OplError::InvalidInput(format!("knots {knots:?} must be finite and strictly ascending")));
        }
        Ok(PolicySpec::Threshold { feature, knots })
    }

    pub fn fixed(assignments: Vec<usize>, arm_count: usize) -> Result<Self> {
        if let Some(&bad) = assignments.iter().find(|&&a| a >= arm_count) {
            return Err(OplError::InvalidInput(format!("assigned arm {bad} out of range")));
        }
        Ok(PolicySpec::Fixed(assignments))
    }

    pub fn evaluate(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        match self {
            PolicySpec::Threshold { feature, knots } => {
                if *feature >= features.ncols() {
                    return Err(OplError::InvalidInput(format!(
                        "threshold feature {feature} out of range ({} columns)",
                        features.ncols()
                    )));
                }
                Ok(features.column(*feature).iter().map(|&x| threshold_arm(knots, x)).collect())
            }
            PolicySpec::FirstBest(model) => {
                if model.n_features() != features.ncols() {
                    return Err(OplError::LengthMismatch {
                        what: "model features vs feature matrix",
                        left: model.n_features(),
                        right: features.ncols(),
                    });
                }
                Ok(first_best(&model.predict_matrix(features)))
            }
            PolicySpec::Fixed(arms) => {
                if arms.len() != features.nrows() {
                    return Err(OplError::LengthMismatch {
                        what: "fixed assignment vs feature rows",
                        left: arms.len(),
                        right: features.nrows(),
                    });
                }
                Ok(arms.clone())
            }
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            PolicySpec::Threshold { feature, knots } => {
                let k: Vec<String> = knots.iter().map(|v| v.to_string()).collect();
                format!("kind=threshold\nfeature={feature}\nknots={}\n", k.join(","))
            }
            PolicySpec::Fixed(arms) => {
                let a: Vec<String> = arms.iter().map(|v| v.to_string()).collect();
                format!("kind=fixed\nassignments={}\n", a.join(","))
            }
            PolicySpec::FirstBest(model) => format!("kind=first_best\n{}", model.to_text()),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("kind="))
            .ok_or_else(|| OplError::InvalidInput("policy text must start with kind=".into()))?;
        let rest: Vec<&str> = lines.collect();
        let field = |name: &str| -> Result<&str> {
            rest.iter()
                .find_map(|l| l.strip_prefix(name).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| OplError::InvalidInput(format!("policy text lacks `{name}`")))
        };
        match kind {
            "threshold" => {
                let feature = field("feature")?
                    .parse()
                    .map_err(|_| OplError::InvalidInput("bad threshold feature".into()))?;
                let knots = field("knots")?
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| OplError::InvalidInput("bad knot list".into()))?;
                Self::threshold(feature, knots)
            }
            "fixed" => {
                let raw = field("assignments")?;
                let arms = if raw.is_empty() {
                    Vec::new()
                } else {
                    raw.split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| OplError::InvalidInput("bad assignment list".into()))?
                };
                Ok(PolicySpec::Fixed(arms))
            }
            "first_best" => Ok(PolicySpec::FirstBest(ConditionalMeanModel::from_text(&rest.join("\n"))?)),
            other => Err(OplError::InvalidInput(format!("unknown policy kind `{other}`"))),
        }
    }
}

pub fn threshold_arm(knots: &[f64], x: f64) -> usize {
    knots.partition_point(|&c| c < x)
}

/// Per-unit argmax over arms, ties to the lowest arm.
pub fn first_best(mu: &Array2<f64>) -> Vec<usize> {
    mu.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

/// `g` evenly spaced points from `lo` to `hi` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, g: usize) -> Vec<f64> {
    match g {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..g).map(|k| lo + (hi - lo) * k as f64 / (g - 1) as f64).collect(),
    }
}

/// Threshold rules on one feature with knots drawn from a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdClass {
    pub feature: usize,
    pub grid: Vec<f64>,
}

impl ThresholdClass {
    pub fn new(feature: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(OplError::InvalidInput("grid needs at least two points".into()));
        }
        if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OplError::InvalidInput("grid must be finite and strictly ascending".into()));
        }
        Ok(Self { feature, grid })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    pub knots: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySearchResult {
    pub best_policy: PolicySpec,
    pub best_value: f64,
    pub value_surface: Vec<SurfacePoint>,
}

impl PolicySearchResult {
    pub fn best_knots(&self) -> &[f64] {
        match &self.best_policy {
            PolicySpec::Threshold { knots, .. } => knots,
            _ => &[],
        }
    }

    pub fn write_surface<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let j = self.value_surface.first().map_or(0, |p| p.knots.len());
        let mut header: Vec<String> = (1..=j).map(|k| format!("c{k}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for p in &self.value_surface {
            let mut rec: Vec<String> = p.knots.iter().map(|v| v.to_string()).collect();
            rec.push(p.value.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exhaustive search over every ascending tuple of `J` knots from `grid`,
/// scoring each induced threshold rule with `estimator`. The best tuple is
/// the first one (in lexicographic order) attaining the maximum.
pub fn procedure1_grid_search(
    data: &Dataset,
    nuisance: &NuisanceEstimates,
    feature: usize,
    grid: &[f64],
    estimator: Estimator,
) -> Result<PolicySearchResult> {
    let class = ThresholdClass::new(feature, grid.to_vec())?;
    search_threshold_class(data, nuisance, &class, estimator)
}

pub fn search_threshold_class(
    data: &Dataset,
    nuisance: &NuisanceEstimates,
    class: &ThresholdClass,
    estimator: Estimator,
) -> Result<PolicySearchResult> {
    if class.feature >= data.n_features() {
        return Err(OplError::InvalidInput(format!("feature {} out of range", class.feature)));
    }
    let arms = data.arm_count();
    let knots = arms - 1;
    let g = class.grid.len();
    if g < knots {
        return Err(OplError::InvalidInput(format!(
            "grid of {g} points admits no ascending tuple of {knots} knots"
        )));
    }
    let scores = score_matrix(estimator, data, nuisance)?;
    let n = data.len();

    // cum[j][t]: sum of arm-j scores over units with x <= grid[t]; index
    // 0 stands for -inf and g + 1 for +inf.
    let x = data.features().column(class.feature);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut cum = vec![vec![0.0; g + 2]; arms];
    for (j, row) in cum.iter_mut().enumerate() {
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        let mut s = 0.0;
        for &i in &order {
            s += scores[[i, j]];
            prefix.push(s);
        }
        for (t, &c) in class.grid.iter().enumerate() {
            let count = order.partition_point(|&i| x[i] <= c);
            row[t + 1] = prefix[count];
        }
        row[g + 1] = s;
    }

    let mut surface = Vec::new();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut tuple: Vec<usize> = (0..knots).collect();
    loop {
        let mut total = 0.0;
        let mut lower = 0;
        for (j, row) in cum.iter().enumerate() {
            let upper = if j < knots { tuple[j] + 1 } else { g + 1 };
            total += row[upper] - row[lower];
            lower = upper;
        }
        let value = total / n as f64;
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, tuple.clone()));
        }
        surface.push(SurfacePoint {
            knots: tuple.iter().map(|&t| class.grid[t]).collect(),
            value,
        });
        if !next_combination(&mut tuple, g) {
            break;
        }
    }
    let (best_value, idx) = best.ok_or_else(|| OplError::InvalidInput("no feasible knot tuple".into()))?;
    Ok(PolicySearchResult {
        best_policy: PolicySpec::threshold(class.feature, idx.iter().map(|&t| class.grid[t]).collect())?,
        best_value,
        value_surface: surface,
    })
}

/// Advances `c` to the next ascending `k`-subset of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Cross-fitted doubly robust policy learning over a threshold class.
pub fn caipwl(
    data: &Dataset,
    k: usize,
    seed: u64,
    class: &ThresholdClass,
    ridge: f64,
    p_min: f64,
) -> Result<PolicySearchResult> {
    let plan = FoldPlan::new(data.len(), k, seed)?;
    caipwl_with(data, &plan, class, &NuisanceConfig::new(ridge, p_min))
}

pub fn caipwl_with(
    data: &Dataset,
    plan: &FoldPlan,
    class: &ThresholdClass,
    config: &NuisanceConfig,
) -> Result<PolicySearchResult> {
    let nuisance = cross_fit_with(data, plan, config)?;
    caipwl_from_nuisance(data, &nuisance, class)
}

/// The maximisation step alone, given out-of-fold (or supplied) nuisances.
pub fn caipwl_from_nuisance(
    data: &Dataset,
    nuisance: &NuisanceEstimates,
    class: &ThresholdClass,
) -> Result<PolicySearchResult> {
    search_threshold_class(data, nuisance, class, Estimator::Dr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::Provenance;
    use crate::value::estimate;
    use ndarray::array;

    #[test]
    fn threshold_boundaries() {
        let p = PolicySpec::threshold(0, vec![1.0, 2.0]).unwrap();
        let x = array![[0.5], [1.0], [1.5], [2.0], [2.5]];
        assert_eq!(p.evaluate(&x).unwrap(), vec![0, 0, 1, 1, 2]);
        assert!(PolicySpec::threshold(0, vec![2.0, 1.0]).is_err());
        assert!(PolicySpec::threshold(0, vec![1.0, 1.0]).is_err());
        assert!(PolicySpec::threshold(1, vec![1.0]).unwrap().evaluate(&x).is_err());
    }

    #[test]
    fn first_best_ties_and_example() {
        assert_eq!(first_best(&array![[100.0, 40.0, 60.0], [1.0, 1.0, 1.0], [0.0, 2.0, 2.0]]), vec![0, 0, 1]);
    }

    #[test]
    fn policy_text_round_trip() {
        for p in [
            PolicySpec::threshold(2, vec![-0.5, 0.25]).unwrap(),
            PolicySpec::Fixed(vec![0, 2, 1]),
            PolicySpec::Fixed(vec![]),
        ] {
            assert_eq!(PolicySpec::from_text(&p.to_text()).unwrap(), p);
        }
        assert!(PolicySpec::from_text("kind=tree\n").is_err());
    }

    #[test]
    fn combinations_in_order() {
        let mut c = vec![0, 1];
        let mut all = vec![c.clone()];
        while next_combination(&mut c, 4) {
            all.push(c.clone());
        }
        assert_eq!(all, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    fn toy() -> (Dataset, NuisanceEstimates) {
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
        let n = x.len();
        let actions: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rewards: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let data = Dataset::new(
            Array2::from_shape_vec((n, 1), x).unwrap(),
            actions,
            rewards,
            3,
            vec!["x".into()],
        )
        .unwrap();
        let mu = Array2::from_shape_fn((n, 3), |(i, j)| ((i + 2 * j) as f64 * 0.21).cos());
        let p = Array2::from_shape_fn((n, 3), |(i, j)| if j == i % 3 { 0.5 } else { 0.25 });
        (data, NuisanceEstimates::new(mu, p, Provenance::Supplied).unwrap())
    }

    #[test]
    fn grid_search_matches_direct_evaluation() {
        let (data, est) = toy();
        let grid = uniform_grid(-0.5, 3.5, 9);
        for e in Estimator::ALL {
            let res = procedure1_grid_search(&data, &est, 0, &grid, e).unwrap();
            assert_eq!(res.value_surface.len(), 36);
            let mut brute_best = f64::NEG_INFINITY;
            for point in &res.value_surface {
                let pi = PolicySpec::threshold(0, point.knots.clone()).unwrap().evaluate(data.features()).unwrap();
                let v = estimate(e, &data, &pi, &est).unwrap().value;
                assert!((v - point.value).abs() < 1e-12);
                brute_best = brute_best.max(point.value);
            }
            assert_eq!(res.best_value, brute_best);
        }
    }

    #[test]
    fn single_pair_grid_and_lexicographic_ties() {
        let (data, est) = toy();
        let res = procedure1_grid_search(&data, &est, 0, &[0.5, 1.5], Estimator::Ra).unwrap();
        assert_eq!(res.best_knots(), &[0.5, 1.5]);
        // knots beyond the data all induce the same rule
        let res = procedure1_grid_search(&data, &est, 0, &[10.0, 11.0, 12.0], Estimator::Dr).unwrap();
        assert_eq!(res.best_knots(), &[10.0, 11.0]);
        assert!(procedure1_grid_search(&data, &est, 0, &[1.0], Estimator::Dr).is_err());
    }

    #[test]
    fn surface_csv() {
        let (data, est) = toy();
        let res = procedure1_grid_search(&data, &est, 0, &[0.5, 1.5, 2.5], Estimator::Ra).unwrap();
        let mut buf = Vec::new();
        res.write_surface(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("c1,c2,value\n0.5,1.5,"));
        assert_eq!(text.lines().count(), 4);
    }
}
