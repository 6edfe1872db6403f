//! Shared fixtures for the criterion benches.

use oplkit::nuisance::{fit_batch, NuisanceConfig, NuisanceEstimates};
use oplkit::{generate_synthetic, Dataset, DgpSpec};

/// Reference draw of `n` units with batch-fitted nuisances.
pub fn fixture(n: usize, seed: u64) -> (Dataset, NuisanceEstimates) {
    let (data, _) = generate_synthetic(&DgpSpec::reference(n), seed).expect("reference spec is valid");
    let nuisance = fit_batch(&data, &NuisanceConfig::default()).expect("reference data covers every arm");
    (data, nuisance)
}
