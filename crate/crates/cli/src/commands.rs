use std::path::{Path, PathBuf};

use oplkit::data::{generate_synthetic, load_csv_with, Dataset, DgpSpec, LoadOptions, NoiseModel};
use oplkit::diagnostics::{
    confounding_sweep, diagnose_overlap, inversion_experiment, write_confounding_csv, write_inversion_csv,
};
use oplkit::nuisance::{
    cross_fit_with, fit_batch, fit_conditional_means, fit_propensity, FoldPlan, NuisanceConfig, NuisanceEstimates,
};
use oplkit::online::{replay, StepSchedule, UpdateMode};
use oplkit::policy::{first_best, procedure1_grid_search, uniform_grid, PolicySpec};
use oplkit::risk::{RiskProfile, RiskRegime, RiskSweepConfig};
use oplkit::value::{estimate, regret, Estimator};
use oplkit::OplError;

use crate::error::{CliError, Result};
use crate::output::Output;
use crate::settings::Settings;

fn load(s: &Settings) -> Result<(Dataset, PathBuf)> {
    let path = s.path("input")?;
    let cuts: Vec<f64> = s.list("cuts")?;
    let options = LoadOptions {
        action_column: s.get("action-column")?,
        reward_column: s.get("reward-column")?,
        drop_columns: s.list("drop")?,
        cut_points: (!cuts.is_empty()).then_some(cuts),
    };
    let data = load_csv_with(&path, &options).map_err(|e| match e {
        OplError::Io(source) => CliError::io(&path, source),
        other => other.into(),
    })?;
    Ok((data, path))
}

fn output(s: &Settings, inputs: &[&Path]) -> Result<Output> {
    Output::new(&s.path("output-dir")?, inputs)
}

fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core(e.into())
}

fn estimators(s: &Settings) -> Result<Vec<Estimator>> {
    match s.get::<String>("estimator")?.as_str() {
        "all" => Ok(Estimator::ALL.to_vec()),
        one => Ok(vec![one.parse().map_err(|e| CliError::Usage(format!("{e}")))?]),
    }
}

fn profile(s: &Settings, name: &str) -> Result<RiskProfile> {
    let regime = match name.parse::<RiskRegime>().map_err(|e| CliError::Usage(e.to_string()))? {
        RiskRegime::MeanVariance { .. } => RiskRegime::MeanVariance { rho: s.get("rho")? },
        other => other,
    };
    RiskProfile::new(regime).map_err(|e| CliError::Usage(e.to_string()))
}

/// Batch fit when `k-folds` is below 2, cross-fit otherwise. Also returns
/// the fold of each unit (0 throughout for a batch fit).
fn nuisances(s: &Settings, data: &Dataset) -> Result<(NuisanceEstimates, Vec<usize>)> {
    let config = NuisanceConfig::new(s.get("ridge")?, s.get("pmin")?);
    let k: usize = s.get("k-folds")?;
    if k < 2 {
        return Ok((fit_batch(data, &config)?, vec![0; data.len()]));
    }
    let plan = FoldPlan::new(data.len(), k, s.get("seed")?)?;
    Ok((cross_fit_with(data, &plan, &config)?, plan.labels().to_vec()))
}

/// `lo:hi:points` or an explicit comma-separated list. Without a value the
/// grid spans the 5th to 95th percentile of the feature in 21 points.
fn grid(s: &mut Settings, data: &Dataset, feature: usize) -> Result<Vec<f64>> {
    let Some(raw) = s.raw("grid").map(str::to_string) else {
        let mut col: Vec<f64> = data.features().column(feature).to_vec();
        col.sort_by(f64::total_cmp);
        let at = |q: f64| col[((col.len() - 1) as f64 * q).round() as usize];
        let g = uniform_grid(at(0.05), at(0.95), 21);
        let text: Vec<String> = g.iter().map(|v| v.to_string()).collect();
        s.set("grid", text.join(","));
        return Ok(g);
    };
    if let [lo, hi, g] = raw.split(':').collect::<Vec<_>>()[..] {
        let bad = || CliError::Usage(format!("invalid grid `{raw}`"));
        let lo = lo.parse().map_err(|_| bad())?;
        let hi = hi.parse().map_err(|_| bad())?;
        let g = g.parse().map_err(|_| bad())?;
        return Ok(uniform_grid(lo, hi, g));
    }
    s.list("grid")
}

pub fn simulate(s: Settings) -> Result<()> {
    let spec = DgpSpec {
        n: s.get("n")?,
        n_features: s.get("features")?,
        arms: s.get("arms")?,
        coefficient_seed: s.get("coef-seed")?,
        noise: NoiseModel::Homoskedastic { sd: s.get("noise-sd")? },
        overlap_floor: s.get("overlap-floor")?,
        confounder_strength: s.get("confounder")?,
        reveal_confounder: s.flag("reveal")?,
        coefficients: None,
    };
    let (data, truth) = generate_synthetic(&spec, s.get("seed")?)?;
    let mut out = output(&s, &[])?;
    data.write_csv(out.create("data.csv")?, "action", "reward")?;

    let mut w = csv_writer(out.create("truth.csv")?);
    let arms = data.arm_count();
    let mut header = vec!["unit".to_string()];
    header.extend((0..arms).map(|j| format!("mu_{j}")));
    header.extend((0..arms).map(|j| format!("p_{j}")));
    header.push("optimal_arm".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let x = data.row(i);
        let mut rec = vec![i.to_string()];
        rec.extend(truth.mu_row(x).iter().map(|v| v.to_string()));
        rec.extend(truth.propensity(x).iter().map(|v| v.to_string()));
        rec.push(truth.optimal_arm(x).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    drop(w);
    println!("simulated {} units, {} arms", data.len(), arms);
    out.finish(&s)
}

pub fn fit(s: Settings) -> Result<()> {
    let (data, input) = load(&s)?;
    let (est, folds) = nuisances(&s, &data)?;
    let mut out = output(&s, &[&input])?;
    let arms = data.arm_count();
    let mut w = csv_writer(out.create("nuisance.csv")?);
    let mut header = vec!["unit".to_string(), "fold".to_string()];
    header.extend((0..arms).map(|j| format!("mu_hat_{j}")));
    header.extend((0..arms).map(|j| format!("p_hat_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut rec = vec![i.to_string(), folds[i].to_string()];
        rec.extend(est.mu_hat().row(i).iter().map(|v| v.to_string()));
        rec.extend(est.p_hat().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    drop(w);
    out.write_text("means_model.txt", &fit_conditional_means(&data, s.get("ridge")?)?.to_text())?;
    out.write_text("propensity_model.txt", &fit_propensity(&data, s.get("pmin")?)?.to_text())?;
    println!("fitted nuisances for {} units ({:?})", data.len(), est.provenance());
    out.finish(&s)
}

pub fn evaluate(s: Settings) -> Result<()> {
    let (data, input) = load(&s)?;
    let policy_path = s.path("policy")?;
    let text = std::fs::read_to_string(&policy_path).map_err(|e| CliError::io(&policy_path, e))?;
    let policy = PolicySpec::from_text(&text)?;
    let assignments = policy.evaluate(data.features())?;
    let (est, _) = nuisances(&s, &data)?;
    let best = first_best(est.mu_hat());
    let mut out = output(&s, &[&input, &policy_path])?;
    let mut w = csv_writer(out.create("values.csv")?);
    w.write_record(["estimator", "value", "n_effective", "first_best_value", "regret"])
        .map_err(csv_err)?;
    for e in estimators(&s)? {
        let v = estimate(e, &data, &assignments, &est)?;
        let opt = estimate(e, &data, &best, &est)?;
        let r = regret(&opt, &v)?;
        println!("{e}: value = {} (n_effective {}), regret = {r}", v.value, v.n_effective);
        w.write_record([
            e.to_string(),
            v.value.to_string(),
            v.n_effective.to_string(),
            opt.value.to_string(),
            r.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    drop(w);
    out.finish(&s)
}

pub fn search(mut s: Settings) -> Result<()> {
    let (data, input) = load(&s)?;
    let feature: usize = s.get("feature")?;
    if feature >= data.n_features() {
        return Err(CliError::Usage(format!(
            "--feature {feature} out of range ({} features)",
            data.n_features()
        )));
    }
    let grid = grid(&mut s, &data, feature)?;
    let (est, _) = nuisances(&s, &data)?;
    let knots = data.arm_count() - 1;
    let mut out = output(&s, &[&input])?;
    let mut surface = csv_writer(out.create("surface.csv")?);
    let mut header = vec!["estimator".to_string()];
    header.extend((1..=knots).map(|k| format!("knot_{k}")));
    header.push("value".into());
    surface.write_record(&header).map_err(csv_err)?;
    let mut best = Vec::new();
    for e in estimators(&s)? {
        let res = procedure1_grid_search(&data, &est, feature, &grid, e)?;
        for p in &res.value_surface {
            let mut rec = vec![e.to_string()];
            rec.extend(p.knots.iter().map(|v| v.to_string()));
            rec.push(p.value.to_string());
            surface.write_record(&rec).map_err(csv_err)?;
        }
        println!("{e}: knots {:?}, value {}", res.best_knots(), res.best_value);
        best.push((e, res));
    }
    surface.flush().map_err(|e| CliError::Core(e.into()))?;
    drop(surface);
    let mut w = csv_writer(out.create("best.csv")?);
    w.write_record(&header).map_err(csv_err)?;
    for (e, res) in &best {
        let mut rec = vec![e.to_string()];
        rec.extend(res.best_knots().iter().map(|v| v.to_string()));
        rec.push(res.best_value.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    drop(w);
    for (e, res) in &best {
        out.write_text(&format!("policy_{}.txt", e.to_string().to_lowercase()), &res.best_policy.to_text())?;
    }
    out.finish(&s)
}

fn sweep_config(s: &Settings) -> Result<RiskSweepConfig> {
    let regimes = s
        .list::<String>("risk")?
        .iter()
        .map(|r| profile(s, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskSweepConfig {
        subsample: s.get("subsample")?,
        replications: s.get("replications")?,
        seed: s.get("seed")?,
        nuisance: NuisanceConfig::new(s.get("ridge")?, s.get("pmin")?),
        regimes,
        ..RiskSweepConfig::default()
    })
}

pub fn risk_sweep(s: Settings) -> Result<()> {
    let (data, input) = load(&s)?;
    let config = sweep_config(&s)?;
    let report = oplkit::risk::risk_sweep(&data, &config)?;
    let mut out = output(&s, &[&input])?;
    report.write_records(out.create("replications.csv")?)?;
    report.write_summary(out.create("summary.csv")?)?;
    let text = report.to_text();
    out.write_text("report.txt", &text)?;
    print!("{text}");
    out.finish(&s)
}

fn update_mode(s: &Settings) -> Result<UpdateMode> {
    let raw: String = s.get("update-mode")?;
    match raw.as_str() {
        "incremental" => Ok(UpdateMode::Incremental {
            schedule: StepSchedule {
                initial: s.get("step")?,
                decay: s.get("decay")?,
            },
            sweeps: s.get("sweeps")?,
        }),
        "refit" => Ok(UpdateMode::RefitEachRound),
        other => other
            .strip_prefix("refit-every:")
            .and_then(|m| m.parse().ok())
            .map(UpdateMode::RefitEvery)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "invalid --update-mode `{other}` (expected incremental, refit or refit-every:<m>)"
                ))
            }),
    }
}

pub fn online(mut s: Settings) -> Result<()> {
    let (data, input) = load(&s)?;
    let warm = match s.opt::<usize>("warm-count")? {
        Some(w) => w,
        None => {
            let w = (data.len() * 9).div_ceil(10);
            s.set("warm-count", w);
            w
        }
    };
    let risk: String = s.get("risk")?;
    let report = replay(&data, warm, s.get("ridge")?, &profile(&s, &risk)?, update_mode(&s)?)?;
    let mut out = output(&s, &[&input])?;
    report.write_csv(out.create("trajectory.csv")?)?;
    let mut w = csv_writer(out.create("summary.csv")?);
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record(["rounds", "match_rate", "regret_estimate"]).map_err(csv_err)?;
    w.write_record([report.rounds.len().to_string(), fmt(report.match_rate()), fmt(report.regret_estimate())])
        .map_err(csv_err)?;
    w.flush().map_err(|e| CliError::Core(e.into()))?;
    drop(w);
    println!(
        "{} rounds, match rate = {}, regret RA = {}",
        report.rounds.len(),
        fmt(report.match_rate()),
        fmt(report.regret_estimate())
    );
    out.finish(&s)
}

pub fn diagnose(mut s: Settings) -> Result<()> {
    let experiment: String = s.get("experiment")?;
    match experiment.as_str() {
        "overlap" => {
            let (data, input) = load(&s)?;
            let report = diagnose_overlap(&data, s.get("ridge")?, s.get("pmin")?, s.get("weak-threshold")?)?;
            let mut out = output(&s, &[&input])?;
            report.write_csv(out.create("overlap.csv")?, data.feature_names())?;
            println!(
                "overlap {}: {:.4} of unit-arm cells below {}",
                report.verdict, report.overall_fraction_below, report.p_min
            );
            out.finish(&s)
        }
        "inversion" | "confounding" => {
            let seed: u64 = s.get("seed")?;
            let count: u64 = s.get("seeds")?;
            let seeds: Vec<u64> = (seed..seed + count).collect();
            let inversion = experiment == "inversion";
            let n = match s.opt::<usize>("n")? {
                Some(n) => n,
                None => {
                    let n = if inversion { 500 } else { 20_000 };
                    s.set("n", n);
                    n
                }
            };
            let mut out = output(&s, &[])?;
            if inversion {
                let rows = inversion_experiment(&s.list::<f64>("floors")?, &seeds, n)?;
                write_inversion_csv(&rows, out.create("inversion.csv")?)?;
                for r in &rows {
                    println!("floor {} {}: {}/{} inversions", r.floor, r.probe, r.inversions, r.trials);
                }
            } else {
                let rows = confounding_sweep(&s.list::<f64>("gammas")?, &seeds, n)?;
                write_confounding_csv(&rows, out.create("confounding.csv")?)?;
                for r in &rows {
                    println!(
                        "gamma {} revealed={}: median |bias| {:.4}, mean bias {:.4}",
                        r.gamma, r.revealed, r.median_abs_bias, r.mean_bias
                    );
                }
            }
            out.finish(&s)
        }
        other => Err(CliError::Usage(format!("unknown experiment `{other}`"))),
    }
}
