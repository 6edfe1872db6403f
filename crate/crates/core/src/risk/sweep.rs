//! Repeated small-subsample comparison of risk regimes on an observational
//! dataset: match rate against the recorded arms and estimated regret of
//! the recorded allocation relative to each regime's first-best rule.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{risk_adjusted_first_best, RiskProfile, RiskRegime, VarianceModel};
use crate::data::Dataset;
use crate::diagnostics::match_rate;
use crate::error::{OplError, Result};
use crate::nuisance::{fit_batch, NuisanceConfig};
use crate::value::{estimate, Estimator, EstimatorTriple};

#[derive(Debug, Clone, PartialEq)]
pub struct RiskSweepConfig {
    pub subsample: usize,
    pub replications: usize,
    pub seed: u64,
    pub nuisance: NuisanceConfig,
    pub regimes: Vec<RiskProfile>,
    /// Standardise features within each subsample before fitting.
    pub standardize: bool,
    /// Subsamples with fewer units of some arm are redrawn.
    pub min_per_arm: usize,
}

impl Default for RiskSweepConfig {
    fn default() -> Self {
        Self {
            subsample: 50,
            replications: 100,
            seed: 0,
            // Small enough to stay close to least squares, large enough to
            // keep an arm with a handful of units solvable.
            nuisance: NuisanceConfig::new(0.01, 0.01),
            regimes: [RiskRegime::Neutral, RiskRegime::Linear, RiskRegime::Quadratic]
                .into_iter()
                .map(|r| RiskProfile::new(r).expect("default floor is valid"))
                .collect(),
            standardize: true,
            min_per_arm: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub regime: RiskProfile,
    pub match_rate: f64,
    pub regret: EstimatorTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSummary {
    pub regime: RiskProfile,
    pub mean_match_rate: f64,
    pub mean_regret: EstimatorTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskSweepReport {
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<RegimeSummary>,
    /// Draws discarded for missing or thin arms.
    pub redraws: usize,
}

impl RiskSweepReport {
    pub fn write_records<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replication", "regime", "match_rate", "regret_ra", "regret_ipw", "regret_dr"])?;
        for r in &self.records {
            w.write_record([
                r.replication.to_string(),
                r.regime.regime.to_string(),
                r.match_rate.to_string(),
                r.regret.ra.to_string(),
                r.regret.ipw.to_string(),
                r.regret.dr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["regime", "mean_match_rate", "mean_regret_ra", "mean_regret_ipw", "mean_regret_dr"])?;
        for s in &self.summaries {
            w.write_record([
                s.regime.regime.to_string(),
                s.mean_match_rate.to_string(),
                s.mean_regret.ra.to_string(),
                s.mean_regret.ipw.to_string(),
                s.mean_regret.dr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One block per regime: match rate then the three regrets.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.summaries {
            out.push_str(&format!("[{}]\n", s.regime.regime));
            out.push_str(&format!("match rate = {:.4}\n", s.mean_match_rate));
            for e in Estimator::ALL {
                out.push_str(&format!("Regret {e} = {}\n", s.mean_regret.get(e)));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `replications` independent subsamples in parallel; each draws its
/// own stream of the seeded generator, so results do not depend on thread
/// scheduling.
pub fn risk_sweep(data: &Dataset, config: &RiskSweepConfig) -> Result<RiskSweepReport> {
    if config.subsample < 2 || config.subsample > data.len() {
        return Err(OplError::InvalidInput(format!(
            "subsample size {} must lie in [2, {}]",
            config.subsample,
            data.len()
        )));
    }
    if config.regimes.is_empty() || config.replications == 0 {
        return Err(OplError::InvalidInput("need at least one regime and one replication".into()));
    }
    data.require_all_arms()?;
    let feasible = data.arm_counts().iter().all(|&c| c >= config.min_per_arm)
        && config.min_per_arm * data.arm_count() <= config.subsample;
    if !feasible {
        return Err(OplError::InvalidInput(format!(
            "cannot draw {} units with {} per arm",
            config.subsample, config.min_per_arm
        )));
    }

    let runs: Vec<(Vec<ReplicationRecord>, usize)> = (0..config.replications)
        .into_par_iter()
        .map(|rep| replicate(data, config, rep))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut redraws = 0;
    for (r, d) in runs {
        records.extend(r);
        redraws += d;
    }
    let summaries = config
        .regimes
        .iter()
        .map(|profile| {
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.regime == *profile).collect();
            let n = rows.len() as f64;
            let avg = |f: &dyn Fn(&ReplicationRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            RegimeSummary {
                regime: *profile,
                mean_match_rate: avg(&|r| r.match_rate),
                mean_regret: EstimatorTriple {
                    ra: avg(&|r| r.regret.ra),
                    ipw: avg(&|r| r.regret.ipw),
                    dr: avg(&|r| r.regret.dr),
                },
            }
        })
        .collect();
    Ok(RiskSweepReport {
        records,
        summaries,
        redraws,
    })
}

fn replicate(data: &Dataset, config: &RiskSweepConfig, rep: usize) -> Result<(Vec<ReplicationRecord>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64);
    let mut redraws = 0;
    let sub = loop {
        let mut idx = sample(&mut rng, data.len(), config.subsample).into_vec();
        idx.sort_unstable();
        let sub = data.subset(&idx)?;
        if sub.arm_counts().iter().all(|&c| c >= config.min_per_arm) {
            break sub;
        }
        redraws += 1;
    };
    let sub = if config.standardize { sub.standardized() } else { sub };

    let nuisance = fit_batch(&sub, &config.nuisance)?;
    let variance = VarianceModel::fit(&sub, config.nuisance.ridge, &config.nuisance.mean_basis)?;
    let sigma = variance.variance_matrix(sub.features()).mapv(f64::sqrt);
    let observed = sub.actions();

    let mut out = Vec::with_capacity(config.regimes.len());
    for profile in &config.regimes {
        let chosen = risk_adjusted_first_best(nuisance.mu_hat(), &sigma, profile)?;
        let mut regret = [0.0; 3];
        for (slot, e) in regret.iter_mut().zip(Estimator::ALL) {
            *slot = estimate(e, &sub, &chosen, &nuisance)?.value - estimate(e, &sub, observed, &nuisance)?.value;
        }
        out.push(ReplicationRecord {
            replication: rep,
            regime: *profile,
            match_rate: match_rate(observed, &chosen)?,
            regret: EstimatorTriple {
                ra: regret[0],
                ipw: regret[1],
                dr: regret[2],
            },
        });
    }
    Ok((out, redraws))
}
