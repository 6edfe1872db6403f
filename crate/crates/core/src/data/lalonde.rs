//! Loader for the prepared jtrain2 job-training table (`data/jtrain2.csv`).
//!
//! Months of training (`mostrn`) are binned into three arms: none, 1 to 21
//! months, and 22 to 24 months. The binary `train` flag is kept aside for
//! reporting and is not used as a feature.

use std::path::Path;

use super::{dataset_from_table, read_table, Dataset, LoadOptions};
use crate::error::Result;

pub const ACTION_COLUMN: &str = "mostrn";
pub const REWARD_COLUMN: &str = "re78";
pub const TREATMENT_FLAG: &str = "train";
pub const MONTH_CUTS: [f64; 2] = [0.0, 21.0];

#[derive(Debug, Clone)]
pub struct JobTraining {
    pub dataset: Dataset,
    pub treated: usize,
    pub untreated: usize,
}

pub fn load_options() -> LoadOptions {
    LoadOptions {
        action_column: ACTION_COLUMN.into(),
        reward_column: REWARD_COLUMN.into(),
        drop_columns: vec![TREATMENT_FLAG.into()],
        cut_points: Some(MONTH_CUTS.to_vec()),
    }
}

pub fn load_jtrain2(path: impl AsRef<Path>) -> Result<JobTraining> {
    let file = std::fs::File::open(path)?;
    let table = read_table(std::io::BufReader::new(file))?;
    let flag = table.column(TREATMENT_FLAG)?;
    let treated = flag.iter().filter(|&&v| v == 1.0).count();
    let dataset = dataset_from_table(&table, &load_options())?;
    Ok(JobTraining {
        untreated: dataset.len() - treated,
        dataset,
        treated,
    })
}
