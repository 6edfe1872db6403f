//! Sequential decision loop: predict every arm at a new context, act on the
//! best (risk-adjusted) prediction, observe a reward, update.

use std::io::Write;

use crate::data::synthetic::argmax;
use crate::data::Dataset;
use crate::error::{OplError, Result};
use crate::nuisance::{Basis, ConditionalMeanModel};
use crate::risk::{utility, RiskProfile};

/// Step size `initial / (1 + decay t)` for the arm's `t`-th gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay: f64,
}

impl StepSchedule {
    pub fn step(&self, t: usize) -> f64 {
        self.initial / (1.0 + self.decay * t as f64)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            initial: 0.05,
            decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateMode {
    /// Gradient step on the new observation, then `sweeps - 1` further
    /// passes over the chosen arm's history. Each step is capped at
    /// `1 / (1 + |z|^2)` for its row.
    Incremental { schedule: StepSchedule, sweeps: usize },
    /// Closed-form refit on the full history after every round.
    RefitEachRound,
    /// Closed-form refit after every `m` rounds, no updates in between.
    RefitEvery(usize),
}

impl Default for UpdateMode {
    fn default() -> Self {
        UpdateMode::Incremental {
            schedule: StepSchedule::default(),
            sweeps: 1,
        }
    }
}

/// What the environment reports after an action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    /// Reward credited to the chosen arm.
    pub reward: f64,
    /// Whether `reward` is a model prediction rather than an observation.
    pub imputed: bool,
    /// Observation appended to the history: the arm actually recorded and
    /// its observed reward.
    pub record: (usize, f64),
}

impl Feedback {
    pub fn observed(arm: usize, reward: f64) -> Self {
        Self {
            reward,
            imputed: false,
            record: (arm, reward),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub chosen: usize,
    /// Predicted mean reward of every arm before the update.
    pub predictions: Vec<f64>,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    round: usize,
    means: ConditionalMeanModel,
    second_moments: ConditionalMeanModel,
    history: Dataset,
    cumulative_regret_estimate: f64,
    mode: UpdateMode,
    ridge: f64,
    basis: Basis,
    steps_taken: Vec<usize>,
    warm_count: usize,
}

/// Batch fits on `initial`; the round counter starts at its length.
pub fn warm_start(initial: &Dataset, ridge: f64, mode: UpdateMode) -> Result<OnlineState> {
    warm_start_with(initial, ridge, &Basis::linear(), mode)
}

pub fn warm_start_with(initial: &Dataset, ridge: f64, basis: &Basis, mode: UpdateMode) -> Result<OnlineState> {
    match mode {
        UpdateMode::RefitEvery(0) => return Err(OplError::InvalidInput("refit interval must be positive".into())),
        UpdateMode::Incremental { sweeps: 0, .. } => {
            return Err(OplError::InvalidInput("incremental mode needs at least one sweep".into()))
        }
        UpdateMode::Incremental { schedule, .. } if !(schedule.initial > 0.0) || !(schedule.decay >= 0.0) => {
            return Err(OplError::InvalidInput("step schedule must be positive".into()))
        }
        _ => {}
    }
    initial.require_all_arms()?;
    let (means, second_moments) = fit_pair(initial, ridge, basis)?;
    Ok(OnlineState {
        round: initial.len(),
        means,
        second_moments,
        history: initial.clone(),
        cumulative_regret_estimate: 0.0,
        mode,
        ridge,
        basis: basis.clone(),
        steps_taken: vec![0; initial.arm_count()],
        warm_count: initial.len(),
    })
}

fn fit_pair(data: &Dataset, ridge: f64, basis: &Basis) -> Result<(ConditionalMeanModel, ConditionalMeanModel)> {
    let squares: Vec<f64> = data.rewards().iter().map(|y| y * y).collect();
    Ok((
        ConditionalMeanModel::fit(data, data.rewards(), ridge, basis)?,
        ConditionalMeanModel::fit(data, &squares, ridge, basis)?,
    ))
}

impl OnlineState {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn history(&self) -> &Dataset {
        &self.history
    }

    pub fn means(&self) -> &ConditionalMeanModel {
        &self.means
    }

    pub fn second_moments(&self) -> &ConditionalMeanModel {
        &self.second_moments
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    pub fn cumulative_regret_estimate(&self) -> f64 {
        self.cumulative_regret_estimate
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.means.predict_row(x)
    }

    /// Conditional standard deviation per arm, from the two moment models.
    pub fn predict_sigma(&self, x: &[f64]) -> Vec<f64> {
        let m = self.means.predict_row(x);
        let s = self.second_moments.predict_row(x);
        s.iter().zip(&m).map(|(s, m)| (s - m * m).max(0.0).sqrt()).collect()
    }

    /// Utility-maximising arm at `x`, ties to the lowest index.
    pub fn select(&self, x: &[f64], profile: &RiskProfile) -> usize {
        let mu = self.predict(x);
        if !profile.needs_variance() {
            return argmax(&mu);
        }
        let sigma = self.predict_sigma(x);
        let u: Vec<f64> = mu.iter().zip(&sigma).map(|(m, s)| utility(*m, *s, profile)).collect();
        argmax(&u)
    }

    /// One round. The oracle is queried once; if it fails, or an update is
    /// rejected, the state is left unchanged.
    pub fn step<F>(&mut self, x_new: &[f64], profile: &RiskProfile, oracle: F) -> Result<StepOutcome>
    where
        F: FnOnce(&[f64], usize) -> Result<Feedback>,
    {
        if x_new.len() != self.history.n_features() {
            return Err(OplError::LengthMismatch {
                what: "context vs features",
                left: x_new.len(),
                right: self.history.n_features(),
            });
        }
        let predictions = self.predict(x_new);
        let chosen = self.select(x_new, profile);
        let feedback = oracle(x_new, chosen)?;
        let (arm, reward) = feedback.record;
        if arm >= self.history.arm_count() || !reward.is_finite() || !feedback.reward.is_finite() {
            return Err(OplError::Oracle(format!("invalid feedback {feedback:?}")));
        }

        let mut next = self.clone();
        next.history.push(x_new, arm, reward)?;
        next.update(x_new, arm, reward)?;
        next.round += 1;
        next.cumulative_regret_estimate += predictions[chosen] - predictions[arm];
        *self = next;
        Ok(StepOutcome {
            chosen,
            predictions,
            feedback,
        })
    }

    fn update(&mut self, x: &[f64], arm: usize, reward: f64) -> Result<()> {
        match self.mode {
            UpdateMode::Incremental { schedule, sweeps } => {
                let t = self.steps_taken[arm];
                let step = self.capped(schedule.step(t), x);
                self.means.update_incremental(x, arm, reward, step)?;
                self.second_moments.update_incremental(x, arm, reward * reward, step)?;
                self.steps_taken[arm] += 1;
                if sweeps > 1 {
                    let rows: Vec<usize> = (0..self.history.len()).filter(|&i| self.history.actions()[i] == arm).collect();
                    for _ in 1..sweeps {
                        for &i in &rows {
                            let (row, y) = (self.history.row(i), self.history.rewards()[i]);
                            let step = self.capped(schedule.step(self.steps_taken[arm]), row);
                            self.means.sgd_step(row, arm, y, step)?;
                            self.second_moments.sgd_step(row, arm, y * y, step)?;
                            self.steps_taken[arm] += 1;
                        }
                    }
                }
            }
            UpdateMode::RefitEachRound => self.refit()?,
            UpdateMode::RefitEvery(m) => {
                if (self.history.len() - self.warm_count) % m == 0 {
                    self.refit()?;
                }
            }
        }
        Ok(())
    }

    /// Caps the step at `1 / (1 + |z|^2)`, where a single update fits its
    /// own observation exactly, so wide feature scales cannot make it diverge.
    fn capped(&self, step: f64, x: &[f64]) -> f64 {
        let z = self.means.basis().expand(x);
        step.min(1.0 / (1.0 + z.iter().map(|v| v * v).sum::<f64>()))
    }

    fn refit(&mut self) -> Result<()> {
        let (means, second) = fit_pair(&self.history, self.ridge, &self.basis)?;
        self.means = means;
        self.second_moments = second;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub x_hash: u64,
    pub chosen: usize,
    pub recorded: usize,
    pub predicted: f64,
    pub reward: f64,
    pub imputed: bool,
    /// `mu_hat(chosen) - mu_hat(recorded)` before the update.
    pub regret: f64,
}

impl RoundRecord {
    pub fn matched(&self) -> bool {
        self.chosen == self.recorded
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub rounds: Vec<RoundRecord>,
    pub final_state: OnlineState,
}

impl ReplayReport {
    /// `None` for an empty trajectory.
    pub fn match_rate(&self) -> Option<f64> {
        if self.rounds.is_empty() {
            return None;
        }
        Some(self.rounds.iter().filter(|r| r.matched()).count() as f64 / self.rounds.len() as f64)
    }

    /// Mean RA regret of the recorded arms against the loop's choices.
    pub fn regret_estimate(&self) -> Option<f64> {
        if self.rounds.is_empty() {
            return None;
        }
        Some(self.rounds.iter().map(|r| r.regret).sum::<f64>() / self.rounds.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "round",
            "x_hash",
            "chosen_arm",
            "recorded_arm",
            "match",
            "predicted_reward",
            "reward",
            "imputed",
        ])?;
        for r in &self.rounds {
            w.write_record([
                r.round.to_string(),
                format!("{:016x}", r.x_hash),
                r.chosen.to_string(),
                r.recorded.to_string(),
                u8::from(r.matched()).to_string(),
                r.predicted.to_string(),
                r.reward.to_string(),
                u8::from(r.imputed).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replays `data` in order: the first `warm` rows warm-start the models,
/// the rest arrive one per round. When the loop picks the recorded arm the
/// observed reward is credited; otherwise the current model's prediction
/// for the chosen arm is credited and flagged as imputed. Either way the
/// recorded observation is what enters the history.
pub fn replay(data: &Dataset, warm: usize, ridge: f64, profile: &RiskProfile, mode: UpdateMode) -> Result<ReplayReport> {
    replay_with(data, warm, ridge, &Basis::linear(), profile, mode)
}

pub fn replay_with(
    data: &Dataset,
    warm: usize,
    ridge: f64,
    basis: &Basis,
    profile: &RiskProfile,
    mode: UpdateMode,
) -> Result<ReplayReport> {
    if warm == 0 || warm > data.len() {
        return Err(OplError::InvalidInput(format!(
            "warm count {warm} must lie in [1, {}]",
            data.len()
        )));
    }
    let initial = data.subset(&(0..warm).collect::<Vec<_>>())?;
    let mut state = warm_start_with(&initial, ridge, basis, mode)?;
    let mut rounds = Vec::with_capacity(data.len() - warm);
    for i in warm..data.len() {
        let x = data.row(i);
        let recorded = data.actions()[i];
        let observed = data.rewards()[i];
        let round = state.round();
        let predicted = state.predict(x);
        let out = state
            .step(x, profile, |_, chosen| {
                Ok(if chosen == recorded {
                    Feedback::observed(recorded, observed)
                } else {
                    Feedback {
                        reward: predicted[chosen],
                        imputed: true,
                        record: (recorded, observed),
                    }
                })
            })
            .map_err(|e| match e {
                OplError::Oracle(m) => OplError::Oracle(format!("round {round}: {m}")),
                other => other,
            })?;
        rounds.push(RoundRecord {
            round,
            x_hash: fnv1a(x),
            chosen: out.chosen,
            recorded,
            predicted: out.predictions[out.chosen],
            reward: out.feedback.reward,
            imputed: out.feedback.imputed,
            regret: out.predictions[out.chosen] - out.predictions[recorded],
        });
    }
    Ok(ReplayReport {
        rounds,
        final_state: state,
    })
}

/// FNV-1a over the little-endian bytes of each value.
pub fn fnv1a(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DgpSpec};
    use crate::nuisance::fit_conditional_means;
    use crate::policy::first_best;

    fn reference(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&DgpSpec::reference(n), seed).unwrap().0
    }

    #[test]
    fn warm_start_matches_batch_fit() {
        let data = reference(300, 1);
        let state = warm_start(&data, 0.5, UpdateMode::RefitEachRound).unwrap();
        let batch = fit_conditional_means(&data, 0.5).unwrap();
        assert_eq!(state.means(), &batch);
        assert_eq!(state.round(), 300);
        assert_eq!(state, warm_start(&data, 0.5, UpdateMode::RefitEachRound).unwrap());
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        assert_eq!(state.select(&x, &RiskProfile::neutral()), first_best(&batch.predict_matrix(&ndarray::arr2(&[x])))[0]);
    }

    #[test]
    fn incremental_step_touches_only_chosen_arm() {
        let data = reference(300, 2);
        let mut state = warm_start(&data, 0.0, UpdateMode::default()).unwrap();
        let before = state.clone();
        let x = [0.3; 5];
        let out = state.step(&x, &RiskProfile::neutral(), |_, arm| Ok(Feedback::observed(arm, 2.0))).unwrap();
        assert_eq!(state.history().len(), 301);
        for arm in 0..3 {
            if arm != out.chosen {
                assert_eq!(state.means().coefficients(arm), before.means().coefficients(arm));
            }
        }
    }

    #[test]
    fn oracle_failure_leaves_state_unchanged() {
        let data = reference(200, 3);
        let mut state = warm_start(&data, 0.0, UpdateMode::RefitEachRound).unwrap();
        let before = state.clone();
        let err = state.step(&[0.0; 5], &RiskProfile::neutral(), |_, _| Err(OplError::Oracle("offline".into())));
        assert!(matches!(err, Err(OplError::Oracle(_))));
        assert_eq!(state, before);
    }

    #[test]
    fn constant_reward_stream_locks_onto_paying_arm() {
        let data = reference(200, 4);
        let rewards: Vec<f64> = data.actions().iter().map(|&a| f64::from(u8::from(a == 2))).collect();
        let data = data.with_rewards(rewards).unwrap();
        let mut state = warm_start(&data, 0.0, UpdateMode::default()).unwrap();
        let probe = reference(50, 5);
        for i in 0..probe.len() {
            let out = state
                .step(probe.row(i), &RiskProfile::neutral(), |_, arm| Ok(Feedback::observed(arm, f64::from(u8::from(arm == 2)))))
                .unwrap();
            assert_eq!(out.chosen, 2);
        }
    }

    #[test]
    fn refit_each_round_equals_offline_prefix_fit() {
        let data = reference(120, 6);
        let report = replay(&data, 60, 0.1, &RiskProfile::neutral(), UpdateMode::RefitEachRound).unwrap();
        assert_eq!(report.rounds.len(), 60);
        for r in [0usize, 17, 59] {
            let round = 60 + r;
            let prefix = data.subset(&(0..round).collect::<Vec<_>>()).unwrap();
            let offline = fit_conditional_means(&prefix, 0.1).unwrap();
            let expect = offline.predict_row(data.row(round));
            let rec = &report.rounds[r];
            assert!((rec.predicted - expect[rec.chosen]).abs() < 1e-9);
        }
    }

    #[test]
    fn replay_edge_cases() {
        let data = reference(80, 7);
        let empty = replay(&data, 80, 0.0, &RiskProfile::neutral(), UpdateMode::default()).unwrap();
        assert!(empty.rounds.is_empty());
        assert_eq!(empty.match_rate(), None);
        assert!(replay(&data, 0, 0.0, &RiskProfile::neutral(), UpdateMode::default()).is_err());
    }

    #[test]
    fn replay_imputes_unmatched_rounds() {
        let data = reference(200, 8);
        let report = replay(&data, 150, 0.0, &RiskProfile::neutral(), UpdateMode::RefitEvery(10)).unwrap();
        for r in &report.rounds {
            assert_eq!(r.imputed, !r.matched());
            if r.imputed {
                assert_eq!(r.reward, r.predicted);
            }
            assert!(r.regret >= 0.0);
        }
        assert_eq!(report.final_state.history().len(), 200);
        let again = replay(&data, 150, 0.0, &RiskProfile::neutral(), UpdateMode::RefitEvery(10)).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn trajectory_csv_header() {
        let data = reference(100, 9);
        let report = replay(&data, 98, 0.0, &RiskProfile::neutral(), UpdateMode::default()).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,x_hash,chosen_arm,recorded_arm,match,predicted_reward,reward,imputed\n98,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn fnv_reference_value() {
        assert_eq!(fnv1a(&[]), 0xcbf2_9ce4_8422_2325);
        assert_ne!(fnv1a(&[0.0]), fnv1a(&[-0.0]));
    }
}
