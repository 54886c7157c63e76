//! Error metrics and the shared dense matrix type for model inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("empty input")]
    Empty,
    #[error("rows have inconsistent widths: expected {expected}, row {row} has {got}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot select {k} of {d} features")]
    KOutOfRange { k: usize, d: usize },
    #[error("need at least {min} rows, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error("outcomes must be 0 or 1")]
    NonBinaryOutcome,
    #[error("invalid hyperparameters")]
    BadParams,
    #[error("feature name count {names} does not match feature count {features}")]
    NameCount { names: usize, features: usize },
}

/// Dense feature matrix stored column-major, so per-feature scans (the
/// hot path of tree training) touch contiguous memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    /// Builds from row slices. All rows must have equal width and finite
    /// values; zero-width rows are allowed (a matrix with no features).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LearnError> {
        let width = rows.first().map_or(0, |r| r.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(LearnError::Ragged {
                    row: i,
                    expected: width,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LearnError::NonFinite);
            }
        }
        let mut columns = vec![Vec::with_capacity(rows.len()); width];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                columns[j].push(v);
            }
        }
        Ok(FeatureMatrix {
            n_rows: rows.len(),
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j][i]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// New matrix keeping `indices` columns in the given order. Indices
    /// may repeat; each must be in range.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Self, LearnError> {
        let mut columns = Vec::with_capacity(indices.len());
        for &j in indices {
            let col = self
                .columns
                .get(j)
                .ok_or(LearnError::KOutOfRange {
                    k: j,
                    d: self.columns.len(),
                })?;
            columns.push(col.clone());
        }
        Ok(FeatureMatrix {
            n_rows: self.n_rows,
            columns,
        })
    }
}

/// Mean squared error between predictions and actuals.
pub fn mse(predictions: &[f64], actuals: &[f64]) -> Result<f64, LearnError> {
    if predictions.len() != actuals.len() {
        return Err(LearnError::LengthMismatch {
            left: predictions.len(),
            right: actuals.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LearnError::Empty);
    }
    if predictions.iter().chain(actuals).any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite);
    }
    let sum: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok(sum / predictions.len() as f64)
}
