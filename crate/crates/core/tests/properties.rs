use ndarray::Array2;
use proptest::prelude::*;

use oplkit::data::{generate_synthetic, load_csv, Dataset, DgpSpec, SyntheticTruth};
use oplkit::diagnostics::{match_rate, overlap_report};
use oplkit::nuisance::{
    apply_floor, cross_fit_with, fit_batch, fit_conditional_means, FoldPlan, NuisanceConfig, NuisanceEstimates,
};
use oplkit::online::{replay, warm_start, Feedback, StepSchedule, UpdateMode};
use oplkit::policy::{caipwl_with, first_best, procedure1_grid_search, uniform_grid, ThresholdClass};
use oplkit::risk::{conditional_variance, risk_adjusted_first_best, utility, RiskProfile, RiskRegime};
use oplkit::value::{value_dr, value_ipw, value_ra, Estimator};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 32,
        ..ProptestConfig::default()
    }
}

fn reference(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&DgpSpec::reference(n), seed).unwrap().0
}

fn nuisance(data: &Dataset) -> NuisanceEstimates {
    fit_batch(data, &NuisanceConfig::new(0.1, 0.01)).unwrap()
}

/// Matrix of `rows x arms` values whose per-row maxima lead the runner-up
/// by at least `gap`.
fn separated_matrix(rows: usize, arms: usize, gap: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-10.0..10.0f64, rows * arms)
        .prop_map(move |v| Array2::from_shape_vec((rows, arms), v).unwrap())
        .prop_filter("near tie", move |m| {
            m.rows().into_iter().all(|r| {
                let mut s = r.to_vec();
                s.sort_by(|a, b| b.total_cmp(a));
                s[0] - s[1] > gap
            })
        })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn csv_round_trip_preserves_values(
        values in prop::collection::vec(-1e6..1e6f64, 24),
        rewards in prop::collection::vec(-1e3..1e3f64, 8),
        tail in prop::collection::vec(0usize..3, 5),
    ) {
        let mut actions = vec![0, 1, 2];
        actions.extend(tail);
        let x = Array2::from_shape_vec((8, 3), values).unwrap();
        let names = vec!["a".to_string(), "b".into(), "c".into()];
        let data = Dataset::new(x, actions, rewards, 3, names).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.save_csv(&path, "arm", "y").unwrap();
        let back = load_csv(&path, "arm", "y").unwrap();
        prop_assert_eq!(back.features(), data.features());
        prop_assert_eq!(back.actions(), data.actions());
        prop_assert_eq!(back.rewards(), data.rewards());
        prop_assert_eq!(back.feature_names(), data.feature_names());
    }

    #[test]
    fn true_propensities_respect_the_floor(floor in 0.0..0.33f64, seed in 0u64..1000) {
        let spec = DgpSpec { overlap_floor: floor, ..DgpSpec::reference(200) };
        let (data, truth) = generate_synthetic(&spec, seed).unwrap();
        let p = truth.propensity_matrix(data.features());
        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= floor - 1e-12, "min {} below floor {}", min, floor);
    }

    #[test]
    fn floored_rows_sum_to_one(raw in prop::collection::vec(0.0..1.0f64, 2..6), frac in 0.0..1.0f64) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let floor = frac / p.len() as f64;
        apply_floor(&mut p, floor);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v >= floor - 1e-9));
    }

    #[test]
    fn ridge_is_affine_and_shrinks_with_penalty(
        seed in 0u64..500,
        lambda in 0.01..100.0f64,
        t in 0.0..1.0f64,
        a in prop::collection::vec(-2.0..2.0f64, 5),
        b in prop::collection::vec(-2.0..2.0f64, 5),
    ) {
        let data = reference(150, seed);
        let model = fit_conditional_means(&data, lambda).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(u, v)| t * u + (1.0 - t) * v).collect();
        for arm in 0..3 {
            let lhs = model.predict(arm, &mix);
            let rhs = t * model.predict(arm, &a) + (1.0 - t) * model.predict(arm, &b);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
        let doubled = fit_conditional_means(&data, 2.0 * lambda).unwrap();
        for arm in 0..3 {
            let norm = |c: &[f64]| c[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let (before, after) = (norm(model.coefficients(arm)), norm(doubled.coefficients(arm)));
            prop_assert!(after <= before + 1e-12, "arm {}: {} -> {}", arm, before, after);
        }
    }

    #[test]
    fn cross_fit_ignores_own_reward(seed in 0u64..500, unit in 0usize..120, bump in -50.0..50.0f64) {
        let data = reference(120, seed);
        let plan = FoldPlan::new(data.len(), 5, seed).unwrap();
        let config = NuisanceConfig::new(0.5, 0.01);
        prop_assume!(cross_fit_with(&data, &plan, &config).is_ok());
        let base = cross_fit_with(&data, &plan, &config).unwrap();
        let mut rewards = data.rewards().to_vec();
        rewards[unit] += bump;
        let moved = cross_fit_with(&data.with_rewards(rewards).unwrap(), &plan, &config).unwrap();
        prop_assert_eq!(base.mu_hat().row(unit), moved.mu_hat().row(unit));
        prop_assert_eq!(base.p_hat().row(unit), moved.p_hat().row(unit));
    }

    #[test]
    fn dr_reduces_to_ipw_without_outcome_model(seed in 0u64..500, policy in prop::collection::vec(0usize..3, 100)) {
        let data = reference(100, seed);
        let est = nuisance(&data);
        let zeroed = est.with_mu(Array2::zeros((100, 3))).unwrap();
        let dr = value_dr(&data, &policy, &zeroed).unwrap().value;
        let ipw = value_ipw(&data, &policy, &zeroed).unwrap().value;
        prop_assert!((dr - ipw).abs() <= 1e-12 * (1.0 + ipw.abs()), "{} vs {}", dr, ipw);
    }

    #[test]
    fn dr_reduces_to_ra_off_the_observed_arms(seed in 0u64..500, shift in 1usize..3) {
        let data = reference(100, seed);
        let est = nuisance(&data);
        let policy: Vec<usize> = data.actions().iter().map(|d| (d + shift) % 3).collect();
        let dr = value_dr(&data, &policy, &est).unwrap().value;
        let ra = value_ra(&policy, &est).unwrap().value;
        prop_assert!((dr - ra).abs() <= 1e-12 * (1.0 + ra.abs()), "{} vs {}", dr, ra);
    }

    #[test]
    fn first_best_ignores_increasing_affine_maps(
        mu in separated_matrix(20, 3, 1e-6),
        a in 0.01..100.0f64,
        b in -100.0..100.0f64,
    ) {
        prop_assert_eq!(first_best(&mu.mapv(|v| a * v + b)), first_best(&mu));
    }

    #[test]
    fn ratio_and_neutral_selection_ignore_scale(
        mu in separated_matrix(20, 3, 1e-3),
        sigma in prop::collection::vec(0.5..2.0f64, 60),
        a in 0.1..10.0f64,
    ) {
        let sigma = Array2::from_shape_vec((20, 3), sigma).unwrap();
        for regime in [RiskRegime::Neutral, RiskRegime::Linear, RiskRegime::Quadratic] {
            let profile = RiskProfile::new(regime).unwrap();
            let utilities = Array2::from_shape_fn((20, 3), |(i, j)| utility(mu[[i, j]], sigma[[i, j]], &profile));
            let close = utilities.rows().into_iter().any(|r| {
                let mut s = r.to_vec();
                s.sort_by(|x, y| y.total_cmp(x));
                s[0] - s[1] <= 1e-9 * (1.0 + s[0].abs())
            });
            prop_assume!(!close);
            let base = risk_adjusted_first_best(&mu, &sigma, &profile).unwrap();
            let scaled = risk_adjusted_first_best(&mu.mapv(|v| a * v), &sigma, &profile).unwrap();
            prop_assert_eq!(base, scaled, "{}", regime);
        }
    }

    #[test]
    fn tolerant_mean_variance_picks_the_highest_mean(
        mu in separated_matrix(20, 3, 1e-3),
        sigma in prop::collection::vec(0.0..10.0f64, 60),
    ) {
        let sigma = Array2::from_shape_vec((20, 3), sigma).unwrap();
        let profile = RiskProfile::new(RiskRegime::MeanVariance { rho: 1e9 }).unwrap();
        prop_assert_eq!(risk_adjusted_first_best(&mu, &sigma, &profile).unwrap(), first_best(&mu));
    }

    #[test]
    fn ratio_utilities_fall_with_dispersion(mu in 1e-3..100.0f64, s1 in 1e-3..10.0f64, ds in 0.0..10.0f64) {
        let s2 = s1 + ds;
        let lin = RiskProfile::new(RiskRegime::Linear).unwrap();
        let quad = RiskProfile::new(RiskRegime::Quadratic).unwrap();
        let (l1, l2) = (utility(mu, s1, &lin), utility(mu, s2, &lin));
        let (q1, q2) = (utility(mu, s1, &quad), utility(mu, s2, &quad));
        prop_assert!(l2 <= l1);
        prop_assert!(q2 <= q1);
        prop_assert!(q2 / q1 <= l2 / l1 + 1e-12);
    }

    #[test]
    fn estimated_variances_are_non_negative(seed in 0u64..500, ridge in 0.0..10.0f64) {
        let data = reference(150, seed);
        let var = conditional_variance(&data, ridge).unwrap();
        prop_assert!(var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn match_rate_is_symmetric_and_label_free(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        relabel in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let forward = match_rate(&a, &b).unwrap();
        prop_assert_eq!(forward, match_rate(&b, &a).unwrap());
        let ra: Vec<usize> = a.iter().map(|&v| relabel[v]).collect();
        let rb: Vec<usize> = b.iter().map(|&v| relabel[v]).collect();
        prop_assert_eq!(forward, match_rate(&ra, &rb).unwrap());
    }

    #[test]
    fn overlap_verdict_never_improves_with_stricter_floor(seed in 0u64..500, lo in 0.0..0.3f64, step in 0.0..0.3f64) {
        let data = reference(200, seed);
        let est = nuisance(&data);
        let loose = overlap_report(&data, &est, lo, 0.05).unwrap().verdict;
        let strict = overlap_report(&data, &est, lo + step, 0.05).unwrap().verdict;
        prop_assert!(strict >= loose, "{} at {} then {} at {}", loose, lo, strict, lo + step);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn refining_the_grid_never_lowers_the_best_value(seed in 0u64..500, extra in prop::collection::vec(-1.0..1.0f64, 1..4)) {
        let data = reference(200, seed);
        let est = nuisance(&data);
        let coarse = uniform_grid(-1.0, 1.0, 5);
        let mut fine = coarse.clone();
        fine.extend(extra);
        fine.sort_by(f64::total_cmp);
        fine.dedup();
        for estimator in [Estimator::Ra, Estimator::Ipw, Estimator::Dr] {
            let a = procedure1_grid_search(&data, &est, 0, &coarse, estimator).unwrap().best_value;
            let b = procedure1_grid_search(&data, &est, 0, &fine, estimator).unwrap().best_value;
            prop_assert!(b >= a - 1e-12, "{:?}: {} -> {}", estimator, a, b);
        }
    }

    #[test]
    fn caipwl_ignores_unit_order(seed in 0u64..500, order in Just((0..150).collect::<Vec<usize>>()).prop_shuffle()) {
        let data = reference(150, seed);
        let plan = FoldPlan::new(150, 3, seed).unwrap();
        let config = NuisanceConfig::new(0.5, 0.01);
        let class = ThresholdClass::new(0, uniform_grid(-1.0, 1.0, 7)).unwrap();
        prop_assume!(caipwl_with(&data, &plan, &class, &config).is_ok());
        let base = caipwl_with(&data, &plan, &class, &config).unwrap();
        let shuffled = data.subset(&order).unwrap();
        let labels: Vec<usize> = order.iter().map(|&i| plan.fold_of(i)).collect();
        let moved_plan = FoldPlan::from_labels(3, labels).unwrap();
        let moved = caipwl_with(&shuffled, &moved_plan, &class, &config).unwrap();
        prop_assert!((base.best_value - moved.best_value).abs() <= 1e-9);
        for (p, q) in base.value_surface.iter().zip(&moved.value_surface) {
            prop_assert_eq!(&p.knots, &q.knots);
            prop_assert!((p.value - q.value).abs() <= 1e-9);
        }
    }

    #[test]
    fn incremental_step_touches_only_the_updated_arm(seed in 0u64..500, xs in prop::collection::vec(-1.0..1.0f64, 5), y in -5.0..5.0f64) {
        let data = reference(120, seed);
        let mode = UpdateMode::Incremental { schedule: StepSchedule::default(), sweeps: 3 };
        let mut state = warm_start(&data, 0.1, mode).unwrap();
        let before = state.clone();
        let out = state
            .step(&xs, &RiskProfile::neutral(), |_: &[f64], arm: usize| Ok(Feedback::observed(arm, y)))
            .unwrap();
        prop_assert_eq!(state.history().len(), before.history().len() + 1);
        prop_assert_eq!(state.round(), before.round() + 1);
        for arm in (0..3).filter(|&a| a != out.chosen) {
            prop_assert_eq!(state.means().coefficients(arm), before.means().coefficients(arm));
            prop_assert_eq!(state.second_moments().coefficients(arm), before.second_moments().coefficients(arm));
        }
    }

    #[test]
    fn replay_is_deterministic(seed in 0u64..500, warm in 60usize..100, mode_pick in 0usize..3) {
        let data = reference(120, seed);
        let mode = [UpdateMode::default(), UpdateMode::RefitEachRound, UpdateMode::RefitEvery(7)][mode_pick];
        let profile = RiskProfile::new(RiskRegime::Linear).unwrap();
        let a = replay(&data, warm, 0.1, &profile, mode).unwrap();
        let b = replay(&data, warm, 0.1, &profile, mode).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn truth_rejects_floor_above_uniform() {
    let spec = DgpSpec {
        overlap_floor: 0.5,
        ..DgpSpec::reference(10)
    };
    assert!(SyntheticTruth::new(&spec).is_err());
}
