//! Principal component analysis on small dense matrices.
//!
//! Components are eigenvectors of the sample covariance (divisor `n - 1`),
//! ordered by nonincreasing eigenvalue. Each component is sign-fixed so its
//! largest-magnitude entry is positive, which makes fitted models
//! reproducible across runs and platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::EmbedError;

/// Fitted PCA basis. `basis[j]` is the j-th component, length `dim()`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    /// Top-k eigenvalues of the sample covariance, nonincreasing.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    /// Input dimension the model was fitted on.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of retained components.
    pub fn k(&self) -> usize {
        self.basis.len()
    }

    /// Projects one row onto the retained components.
    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>, EmbedError> {
        if row.len() != self.dim() {
            return Err(EmbedError::Ragged);
        }
        Ok(self
            .basis
            .iter()
            .map(|component| {
                row.iter()
                    .zip(&self.mean)
                    .zip(component)
                    .map(|((x, m), b)| (x - m) * b)
                    .sum()
            })
            .collect())
    }

    /// Projects a whole matrix, one output row per input row.
    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EmbedError> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Fits a k-component PCA. Requires `rows >= 2` and
/// `1 <= k <= min(rows - 1, d)`.
pub fn pca_fit(rows: &[Vec<f64>], k: usize) -> Result<PcaModel, EmbedError> {
    let n = rows.len();
    if n < 2 {
        return Err(EmbedError::TooFewRows(n));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(EmbedError::Ragged);
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    if k == 0 || k > d.min(n - 1) {
        return Err(EmbedError::KOutOfRange { k, rows: n, cols: d });
    }

    let mut mean = vec![0.0; d];
    for row in rows {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for acc in &mut mean {
        *acc /= n as f64;
    }

    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);

    // Decompose whichever of covariance (d x d) and Gram (n x n) is
    // smaller; they share nonzero eigenvalues, and Gram eigenvectors map
    // up through X^T. The small side is also where the eigensolver stays
    // numerically stable on rank-deficient input.
    let use_gram = d > n;
    let small = if use_gram {
        &centered * centered.transpose() / (n - 1) as f64
    } else {
        centered.transpose() * &centered / (n - 1) as f64
    };
    let eigen = SymmetricEigen::new(small);
    if eigen.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }

    // Sort descending by eigenvalue; ties keep the lower original index.
    let mut order: Vec<usize> = (0..eigen.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("eigenvalues checked finite")
            .then(a.cmp(&b))
    });

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut null_slots = 0;
    for &col in order.iter().take(k) {
        // The sample covariance is positive semidefinite; negative values
        // are rounding noise.
        eigenvalues.push(eigen.eigenvalues[col].max(0.0));
        if use_gram {
            let mapped = centered.transpose() * eigen.eigenvectors.column(col);
            let norm = mapped.norm();
            // ||X^T u||^2 = (n-1) * eigenvalue, so a vanishing norm marks a
            // null-space component the Gram side cannot recover.
            if norm > 1e-9 {
                let mut component: Vec<f64> = (mapped / norm).iter().copied().collect();
                fix_sign(&mut component);
                basis.push(component);
            } else {
                null_slots += 1;
            }
        } else {
            let mut component: Vec<f64> = eigen.eigenvectors.column(col).iter().copied().collect();
            fix_sign(&mut component);
            basis.push(component);
        }
    }
    // Null slots sort after every recovered component, so appending keeps
    // the eigenvalue order.
    for _ in 0..null_slots {
        let mut component = null_space_unit(&basis, d);
        fix_sign(&mut component);
        basis.push(component);
    }

    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
    })
}

/// Deterministic unit vector orthogonal to every row of `basis`: the
/// standard basis vector with the largest residual after projection,
/// re-orthogonalized and normalized. Requires `basis.len() < d`.
fn null_space_unit(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    let residual = |j: usize| -> Vec<f64> {
        let mut r = vec![0.0; d];
        r[j] = 1.0;
        for component in basis {
            let dot = component[j];
            for (ri, ci) in r.iter_mut().zip(component) {
                *ri -= dot * ci;
            }
        }
        r
    };
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut best = 0;
    let mut best_norm = -1.0;
    for j in 0..d {
        let n2 = norm2(&residual(j));
        if n2 > best_norm {
            best_norm = n2;
            best = j;
        }
    }
    // Second projection pass cleans up rounding from the first.
    let mut r = residual(best);
    for component in basis {
        let dot: f64 = r.iter().zip(component).map(|(x, y)| x * y).sum();
        for (ri, ci) in r.iter_mut().zip(component) {
            *ri -= dot * ci;
        }
    }
    let norm = norm2(&r).sqrt();
    for v in &mut r {
        *v /= norm;
    }
    r
}

/// Fits and projects in one step.
pub fn pca_fit_transform(
    rows: &[Vec<f64>],
    k: usize,
) -> Result<(Vec<Vec<f64>>, PcaModel), EmbedError> {
    let model = pca_fit(rows, k)?;
    let scores = model.transform(rows)?;
    Ok((scores, model))
}

/// Flips the component if its largest-magnitude entry is negative. Ties on
/// magnitude resolve to the earliest entry.
fn fix_sign(component: &mut [f64]) {
    let mut best = 0;
    for (i, v) in component.iter().enumerate() {
        if v.abs() > component[best].abs() {
            best = i;
        }
    }
    if component[best] < 0.0 {
        for v in component.iter_mut() {
            *v = -*v;
        }
    }
}
