//! Offline and online policy learning for multi-action treatments from
//! observational data.
//!
//! * [`data`]: datasets, CSV ingestion and synthetic processes with known truth
//! * [`nuisance`]: per-arm conditional means and propensities, cross-fitting
//! * [`value`]: RA, IPW and DR value estimates, regret, bias and variance formulas
//! * [`policy`]: threshold rules, first-best, grid search and cross-fitted learning
//! * [`risk`]: conditional variance and risk-adjusted selection
//! * [`online`]: the sequential decision loop and replay
//! * [`diagnostics`]: overlap checks and identification-failure experiments

pub mod data;
pub mod diagnostics;
mod error;
pub mod nuisance;
pub mod online;
pub mod policy;
pub mod risk;
pub mod value;

pub use data::{generate_synthetic, load_csv, Dataset, DgpSpec, SyntheticTruth};
pub use error::{OplError, Result};
pub use nuisance::{cross_fit, ConditionalMeanModel, FoldPlan, NuisanceEstimates, PropensityModel};
pub use policy::{PolicySearchResult, PolicySpec};
pub use risk::{RiskProfile, RiskRegime};
pub use value::{Estimator, ValueReport};
