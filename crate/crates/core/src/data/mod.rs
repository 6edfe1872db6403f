//! Observational datasets: the `(x, D, Y)` triplets every estimator consumes.
//!
//! A [`Dataset`] is built once and never mutated through the public API. It
//! can come from a CSV file ([`load_csv`], [`load_csv_with`]) or from the
//! synthetic generator in [`synthetic`], which also returns the ground truth
//! needed by the Monte Carlo checks.

pub mod lalonde;
pub mod synthetic;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{OplError, Result};

pub use synthetic::{generate_synthetic, DgpCoefficients, DgpSpec, NoiseModel, SyntheticTruth};

/// Features, observed actions and rewards for `N` units and `J + 1` arms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    arm_count: usize,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Validates and assembles a dataset.
    ///
    /// `arm_count` may exceed `max(actions) + 1` (a subsample can miss an
    /// arm); coverage of every arm is checked when nuisances are fitted.
    pub fn new(
        features: Array2<f64>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        arm_count: usize,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = actions.len();
        if n == 0 {
            return Err(OplError::EmptyDataset);
        }
        if rewards.len() != n {
            return Err(OplError::LengthMismatch {
                what: "rewards vs actions",
                left: rewards.len(),
                right: n,
            });
        }
        if features.nrows() != n {
            return Err(OplError::LengthMismatch {
                what: "feature rows vs actions",
                left: features.nrows(),
                right: n,
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(OplError::LengthMismatch {
                what: "feature names vs feature columns",
                left: feature_names.len(),
                right: features.ncols(),
            });
        }
        if arm_count < 2 {
            return Err(OplError::InvalidInput(format!(
                "at least two arms are required, got {arm_count}"
            )));
        }
        if let Some((i, &a)) = actions.iter().enumerate().find(|(_, &a)| a >= arm_count) {
            return Err(OplError::InvalidInput(format!(
                "unit {i} has action {a}, outside 0..{arm_count}"
            )));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(OplError::InvalidInput(format!("reward of unit {i} is not finite")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(OplError::InvalidInput("features contain non-finite values".into()));
        }
        let features = features.as_standard_layout().into_owned();
        Ok(Self {
            features,
            actions,
            rewards,
            arm_count,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    /// Always false; kept for the `len`/`is_empty` pairing.
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Number of arms, `J + 1`.
    pub fn arm_count(&self) -> usize {
        self.arm_count
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Feature vector of unit `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        self.features
            .row(i)
            .to_slice()
            .expect("features are stored in standard layout")
    }

    /// Observations per arm.
    pub fn arm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.arm_count];
        for &a in &self.actions {
            counts[a] += 1;
        }
        counts
    }

    /// Fails with [`OplError::MissingArm`] naming the first absent arm.
    pub fn require_all_arms(&self) -> Result<()> {
        match self.arm_counts().iter().position(|&c| c == 0) {
            Some(arm) => Err(OplError::MissingArm(arm)),
            None => Ok(()),
        }
    }

    /// Units at `indices`, in that order. The arm count is preserved.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(OplError::InvalidInput(format!("unit index {bad} out of range")));
        }
        Dataset::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.actions[i]).collect(),
            indices.iter().map(|&i| self.rewards[i]).collect(),
            self.arm_count,
            self.feature_names.clone(),
        )
    }

    /// Same units and actions with replacement rewards.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            self.actions.clone(),
            rewards,
            self.arm_count,
            self.feature_names.clone(),
        )
    }

    /// Keeps only the listed feature columns.
    pub fn select_features(&self, columns: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.n_features()) {
            return Err(OplError::InvalidInput(format!("feature column {bad} out of range")));
        }
        Dataset::new(
            self.features.select(Axis(1), columns),
            self.actions.clone(),
            self.rewards.clone(),
            self.arm_count,
            columns.iter().map(|&c| self.feature_names[c].clone()).collect(),
        )
    }

    /// Z-scores every feature column using this dataset's mean and
    /// population standard deviation. Constant columns are centred only.
    pub fn standardized(&self) -> Dataset {
        let mut features = self.features.clone();
        for mut col in features.columns_mut() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let scale = if sd > 0.0 { sd } else { 1.0 };
            col.mapv_inplace(|v| (v - mean) / scale);
        }
        Dataset {
            features,
            ..self.clone()
        }
    }

    pub(crate) fn push(&mut self, row: &[f64], action: usize, reward: f64) -> Result<()> {
        if row.len() != self.n_features() {
            return Err(OplError::LengthMismatch {
                what: "feature vector",
                left: row.len(),
                right: self.n_features(),
            });
        }
        if action >= self.arm_count {
            return Err(OplError::InvalidInput(format!("action {action} out of range")));
        }
        if !reward.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(OplError::InvalidInput("non-finite observation".into()));
        }
        self.features
            .push_row(ndarray::ArrayView1::from(row))
            .expect("row width checked above");
        self.actions.push(action);
        self.rewards.push(reward);
        Ok(())
    }

    /// Writes the dataset as CSV: feature columns, then the action and
    /// reward columns under the given names.
    pub fn write_csv<W: Write>(&self, writer: W, action_column: &str, reward_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(action_column);
        header.push(reward_column);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.actions[i].to_string());
            record.push(self.rewards[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, action_column: &str, reward_column: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), action_column, reward_column)
    }
}

/// A fully numeric CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| OplError::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Reads a headed, comma-separated file whose cells all parse as finite reals.
pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(OplError::EmptyDataset);
    }
    let mut rows = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(headers.len());
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| OplError::Parse {
                row: r + 1,
                column: headers[c].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(OplError::Parse {
                    row: r + 1,
                    column: headers[c].clone(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(OplError::EmptyDataset);
    }
    Ok(Table { headers, rows })
}

/// How to turn a numeric table into a [`Dataset`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub action_column: String,
    pub reward_column: String,
    /// Columns that are neither features nor action/reward.
    pub drop_columns: Vec<String>,
    /// When set, the raw action column is binned with [`discretize_action`].
    pub cut_points: Option<Vec<f64>>,
}

impl LoadOptions {
    pub fn new(action_column: &str, reward_column: &str) -> Self {
        Self {
            action_column: action_column.to_string(),
            reward_column: reward_column.to_string(),
            ..Default::default()
        }
    }
}

/// Loads a CSV where every column other than the action and reward columns
/// is a feature (in file order). `J` is the largest observed action.
pub fn load_csv(path: impl AsRef<Path>, action_column: &str, reward_column: &str) -> Result<Dataset> {
    load_csv_with(path, &LoadOptions::new(action_column, reward_column))
}

pub fn load_csv_with(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let table = read_table(std::io::BufReader::new(file))?;
    dataset_from_table(&table, options)
}

pub fn dataset_from_table(table: &Table, options: &LoadOptions) -> Result<Dataset> {
    let action_idx = table.column_index(&options.action_column)?;
    let reward_idx = table.column_index(&options.reward_column)?;
    let mut dropped = vec![action_idx, reward_idx];
    for name in &options.drop_columns {
        dropped.push(table.column_index(name)?);
    }
    let feature_idx: Vec<usize> = (0..table.headers.len()).filter(|c| !dropped.contains(c)).collect();

    let raw: Vec<f64> = table.rows.iter().map(|r| r[action_idx]).collect();
    let actions = match &options.cut_points {
        Some(cuts) => discretize_action(&raw, cuts)?,
        None => raw
            .iter()
            .enumerate()
            .map(|(r, &v)| {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(OplError::Parse {
                        row: r + 1,
                        column: options.action_column.clone(),
                        message: format!("action `{v}` is not a non-negative integer"),
                    })
                } else {
                    Ok(v as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let arm_count = actions.iter().copied().max().unwrap_or(0) + 1;
    let arm_count = match &options.cut_points {
        Some(cuts) => arm_count.max(cuts.len() + 1),
        None => arm_count,
    };
    let n = table.rows.len();
    let features = Array2::from_shape_fn((n, feature_idx.len()), |(i, j)| table.rows[i][feature_idx[j]]);
    let rewards = table.rows.iter().map(|r| r[reward_idx]).collect();
    let names = feature_idx.iter().map(|&c| table.headers[c].clone()).collect();
    if arm_count < 2 {
        return Err(OplError::InvalidInput("only one distinct action observed".into()));
    }
    Dataset::new(features, actions, rewards, arm_count, names)
}

/// Bins raw treatment intensities: the arm of `v` is the number of cut
/// points strictly below `v`.
pub fn discretize_action(raw: &[f64], cut_points: &[f64]) -> Result<Vec<usize>> {
    if cut_points.is_empty() {
        return Err(OplError::InvalidInput("at least one cut point is required".into()));
    }
    if cut_points.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OplError::InvalidInput("cut points must be strictly ascending".into()));
    }
    Ok(raw
        .iter()
        .map(|&v| cut_points.partition_point(|&c| c < v))
        .collect())
}
