//! `oplkit`: simulate data, fit nuisances, evaluate and learn policies,
//! compare risk regimes, replay the online loop and diagnose overlap.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

mod commands;
mod error;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use error::Result;
use settings::{KeySpec, Settings};

#[derive(Debug, Parser)]
#[command(name = "oplkit", version, about = "Multi-action policy learning from observational data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset with known truth.
    Simulate(SimulateArgs),
    /// Fit (or cross-fit) conditional means and propensities.
    Fit(FitArgs),
    /// Estimate the value of a policy with RA, IPW and/or DR.
    Evaluate(EvaluateArgs),
    /// Grid search over threshold rules on one feature.
    Search(SearchArgs),
    /// Compare risk regimes over repeated small subsamples.
    RiskSweep(RiskSweepArgs),
    /// Replay a dataset through the sequential decision loop.
    Online(OnlineArgs),
    /// Overlap report, or the weak-overlap and confounding experiments.
    Diagnose(DiagnoseArgs),
}

type Flags = Vec<(&'static str, Option<String>)>;

fn show<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

#[derive(Debug, Args)]
struct Common {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for CSV outputs and the manifest.
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    const KEYS: &'static [KeySpec] = &[("output-dir", Some("out")), ("seed", Some("0"))];

    fn flags(&self) -> Flags {
        vec![("output-dir", self.output_dir.clone()), ("seed", show(&self.seed))]
    }
}

#[derive(Debug, Args)]
struct Input {
    /// CSV with one row per unit; columns other than action/reward are features.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    action_column: Option<String>,
    #[arg(long)]
    reward_column: Option<String>,
    /// Ascending cut points binning a raw action column into arms.
    #[arg(long)]
    cuts: Option<String>,
    /// Comma-separated columns to ignore.
    #[arg(long)]
    drop: Option<String>,
}

impl Input {
    const KEYS: &'static [KeySpec] = &[
        ("input", None),
        ("action-column", Some("action")),
        ("reward-column", Some("reward")),
        ("cuts", None),
        ("drop", None),
    ];

    fn flags(&self) -> Flags {
        vec![
            ("input", self.input.clone()),
            ("action-column", self.action_column.clone()),
            ("reward-column", self.reward_column.clone()),
            ("cuts", self.cuts.clone()),
            ("drop", self.drop.clone()),
        ]
    }
}

#[derive(Debug, Args)]
struct Nuisance {
    /// Ridge penalty for the conditional-mean fits.
    #[arg(long)]
    ridge: Option<f64>,
    /// Propensity floor.
    #[arg(long)]
    pmin: Option<f64>,
    /// Cross-fitting folds; 1 fits on the full sample.
    #[arg(long)]
    k_folds: Option<usize>,
}

impl Nuisance {
    const KEYS: &'static [KeySpec] = &[("ridge", Some("1")), ("pmin", Some("0.01")), ("k-folds", Some("5"))];

    fn flags(&self) -> Flags {
        vec![
            ("ridge", show(&self.ridge)),
            ("pmin", show(&self.pmin)),
            ("k-folds", show(&self.k_folds)),
        ]
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of units.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    arms: Option<usize>,
    /// Seed for the outcome and assignment coefficients.
    #[arg(long)]
    coef_seed: Option<u64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Minimum true propensity.
    #[arg(long)]
    overlap_floor: Option<f64>,
    /// Strength of the hidden confounder.
    #[arg(long)]
    confounder: Option<f64>,
    /// Append the hidden confounder as the last feature.
    #[arg(long)]
    reveal: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    nuisance: Nuisance,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    nuisance: Nuisance,
    #[arg(long, value_parser = ["ra", "ipw", "dr", "all"])]
    estimator: Option<String>,
    /// Policy file as written by `search`.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    nuisance: Nuisance,
    #[arg(long, value_parser = ["ra", "ipw", "dr", "all"])]
    estimator: Option<String>,
    /// Index of the thresholded feature.
    #[arg(long)]
    feature: Option<usize>,
    /// Knot candidates: `lo:hi:points` or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

#[derive(Debug, Args)]
struct RiskSweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    pmin: Option<f64>,
    /// Comma-separated regimes from neutral, linear, quadratic, mv.
    #[arg(long)]
    risk: Option<String>,
    /// Risk tolerance for the mean-variance regime.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Debug, Args)]
struct OnlineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    ridge: Option<f64>,
    /// Leading rows used for the warm start.
    #[arg(long)]
    warm_count: Option<usize>,
    #[arg(long, value_parser = ["neutral", "linear", "quadratic", "mv"])]
    risk: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    /// `incremental`, `refit` or `refit-every:<m>`.
    #[arg(long)]
    update_mode: Option<String>,
    /// Initial gradient step for incremental updates.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    ridge: Option<f64>,
    /// Propensity level below which a unit-arm cell counts as thin.
    #[arg(long)]
    pmin: Option<f64>,
    #[arg(long)]
    weak_threshold: Option<f64>,
    #[arg(long, value_parser = ["overlap", "inversion", "confounding"])]
    experiment: Option<String>,
    /// Overlap floors for the inversion experiment.
    #[arg(long)]
    floors: Option<String>,
    /// Confounder strengths for the confounding sweep.
    #[arg(long)]
    gammas: Option<String>,
    /// Number of seeds, counted up from --seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// Units per simulated dataset.
    #[arg(long)]
    n: Option<usize>,
}

fn keys(groups: &[&[KeySpec]]) -> Vec<KeySpec> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn settings(name: &'static str, common: &Common, keys: Vec<KeySpec>, mut flags: Flags) -> Result<Settings> {
    flags.extend(common.flags());
    Settings::resolve(name, &keys, common.config.as_deref(), flags)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let k = keys(&[
                Common::KEYS,
                &[
                    ("n", Some("1000")),
                    ("features", Some("5")),
                    ("arms", Some("3")),
                    ("coef-seed", Some("2024")),
                    ("noise-sd", Some("1")),
                    ("overlap-floor", Some("0.05")),
                    ("confounder", Some("0")),
                    ("reveal", Some("false")),
                ],
            ]);
            let flags = vec![
                ("n", show(&a.n)),
                ("features", show(&a.features)),
                ("arms", show(&a.arms)),
                ("coef-seed", show(&a.coef_seed)),
                ("noise-sd", show(&a.noise_sd)),
                ("overlap-floor", show(&a.overlap_floor)),
                ("confounder", show(&a.confounder)),
                ("reveal", a.reveal.then(|| "true".to_string())),
            ];
            commands::simulate(settings("simulate", &a.common, k, flags)?)
        }
        Command::Fit(a) => {
            let k = keys(&[Common::KEYS, Input::KEYS, Nuisance::KEYS]);
            let mut flags = a.input.flags();
            flags.extend(a.nuisance.flags());
            commands::fit(settings("fit", &a.common, k, flags)?)
        }
        Command::Evaluate(a) => {
            let k = keys(&[
                Common::KEYS,
                Input::KEYS,
                Nuisance::KEYS,
                &[("estimator", Some("all")), ("policy", None)],
            ]);
            let mut flags = a.input.flags();
            flags.extend(a.nuisance.flags());
            flags.extend([("estimator", a.estimator), ("policy", a.policy)]);
            commands::evaluate(settings("evaluate", &a.common, k, flags)?)
        }
        Command::Search(a) => {
            let k = keys(&[
                Common::KEYS,
                Input::KEYS,
                Nuisance::KEYS,
                &[("estimator", Some("dr")), ("feature", Some("0")), ("grid", None)],
            ]);
            let mut flags = a.input.flags();
            flags.extend(a.nuisance.flags());
            flags.extend([("estimator", a.estimator), ("feature", show(&a.feature)), ("grid", a.grid)]);
            commands::search(settings("search", &a.common, k, flags)?)
        }
        Command::RiskSweep(a) => {
            let k = keys(&[
                Common::KEYS,
                Input::KEYS,
                &[
                    ("ridge", Some("0.01")),
                    ("pmin", Some("0.01")),
                    ("risk", Some("neutral,linear,quadratic")),
                    ("rho", Some("1")),
                    ("subsample", Some("50")),
                    ("replications", Some("100")),
                ],
            ]);
            let mut flags = a.input.flags();
            flags.extend([
                ("ridge", show(&a.ridge)),
                ("pmin", show(&a.pmin)),
                ("risk", a.risk),
                ("rho", show(&a.rho)),
                ("subsample", show(&a.subsample)),
                ("replications", show(&a.replications)),
            ]);
            commands::risk_sweep(settings("risk-sweep", &a.common, k, flags)?)
        }
        Command::Online(a) => {
            let k = keys(&[
                Common::KEYS,
                Input::KEYS,
                &[
                    ("ridge", Some("1")),
                    ("warm-count", None),
                    ("risk", Some("neutral")),
                    ("rho", Some("1")),
                    ("update-mode", Some("incremental")),
                    ("step", Some("0.05")),
                    ("decay", Some("0.01")),
                    ("sweeps", Some("1")),
                ],
            ]);
            let mut flags = a.input.flags();
            flags.extend([
                ("ridge", show(&a.ridge)),
                ("warm-count", show(&a.warm_count)),
                ("risk", a.risk),
                ("rho", show(&a.rho)),
                ("update-mode", a.update_mode),
                ("step", show(&a.step)),
                ("decay", show(&a.decay)),
                ("sweeps", show(&a.sweeps)),
            ]);
            commands::online(settings("online", &a.common, k, flags)?)
        }
        Command::Diagnose(a) => {
            let k = keys(&[
                Common::KEYS,
                Input::KEYS,
                &[
                    ("ridge", Some("1")),
                    ("pmin", Some("0.01")),
                    ("weak-threshold", Some("0.05")),
                    ("experiment", Some("overlap")),
                    ("floors", Some("0.2,0.1,0.05,0")),
                    ("gammas", Some("0,0.5,1,2")),
                    ("seeds", Some("100")),
                    ("n", None),
                ],
            ]);
            let mut flags = a.input.flags();
            flags.extend([
                ("ridge", show(&a.ridge)),
                ("pmin", show(&a.pmin)),
                ("weak-threshold", show(&a.weak_threshold)),
                ("experiment", a.experiment),
                ("floors", a.floors),
                ("gammas", a.gammas),
                ("seeds", show(&a.seeds)),
                ("n", show(&a.n)),
            ]);
            commands::diagnose(settings("diagnose", &a.common, k, flags)?)
        }
    }
}

/// Lists the flags of the subcommand named on the command line.
fn print_valid_flags() {
    let cmd = Cli::command();
    let Some(sub) = std::env::args().nth(1).and_then(|name| cmd.find_subcommand(&name).cloned()) else {
        return;
    };
    let flags: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
        .collect();
    eprintln!("\nvalid flags for `{}`: {}", sub.get_name(), flags.join(", "));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.kind() == ErrorKind::UnknownArgument {
                print_valid_flags();
            }
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
