//! Logistic regression fitted by iteratively reweighted least squares,
//! with Wald standard errors, z statistics and two-sided p-values.
//!
//! The design matrix is taken as given: callers wanting an intercept
//! prepend a column of ones. Quasi-separated problems are detected
//! (diverging coefficients or a singular weighted normal matrix) and
//! returned flagged rather than failed, since a separated fit still
//! tells the analyst something.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::metrics::{FeatureMatrix, LearnError};

/// Convergence threshold on the max absolute coefficient update.
const TOLERANCE: f64 = 1e-8;
/// Iteration cap for IRLS.
const MAX_ITERATIONS: usize = 100;
/// A coefficient beyond this magnitude is treated as diverging, which
/// with standardized-ish covariates only happens under separation.
const DIVERGENCE_BOUND: f64 = 30.0;
/// Floor for the IRLS weights, keeping the normal matrix finite when
/// fitted probabilities saturate.
const WEIGHT_FLOOR: f64 = 1e-10;

/// A fitted logistic regression. Vectors are indexed like the design
/// matrix columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub converged: bool,
    pub n_iterations: usize,
    /// Present when the fit stopped early or should be read with care.
    pub diagnostic: Option<String>,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Fits `P(y=1) = sigmoid(x . beta)` starting from all-zero coefficients.
///
/// `y` entries must be exactly 0.0 or 1.0 and `x` must have at least as
/// many rows as columns. Inference columns: Wald standard errors from the
/// inverse of the final weighted normal matrix, z = beta / se, and
/// two-sided normal p-values.
pub fn logistic_fit(x: &FeatureMatrix, y: &[f64]) -> Result<LogisticFit, LearnError> {
    let n = x.n_rows();
    let d = x.n_cols();
    if n == 0 || d == 0 {
        return Err(LearnError::Empty);
    }
    if y.len() != n {
        return Err(LearnError::LengthMismatch {
            left: n,
            right: y.len(),
        });
    }
    if n < d {
        return Err(LearnError::TooFewRows { min: d, got: n });
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(LearnError::NonBinaryOutcome);
    }

    let design = DMatrix::from_fn(n, d, |i, j| x.get(i, j));
    let outcome = DVector::from_column_slice(y);

    let mut beta = DVector::zeros(d);
    let mut converged = false;
    let mut n_iterations = 0;
    let mut diagnostic: Option<String> = None;
    let mut last_normal: Option<DMatrix<f64>> = None;

    for iteration in 1..=MAX_ITERATIONS {
        n_iterations = iteration;
        let eta = &design * &beta;
        let probs = eta.map(sigmoid);
        let weights = probs.map(|p| (p * (1.0 - p)).max(WEIGHT_FLOOR));

        // X^T W X and X^T (y - p), built without materializing W.
        let mut weighted = design.clone();
        for i in 0..n {
            weighted.row_mut(i).scale_mut(weights[i]);
        }
        let normal = design.transpose() * &weighted;
        let gradient = design.transpose() * (&outcome - &probs);

        let chol = match Cholesky::new(normal.clone()) {
            Some(chol) => chol,
            None => {
                diagnostic = Some(format!(
                    "weighted normal matrix became singular at iteration {iteration} \
                     (collinear columns or separation)"
                ));
                last_normal = Some(normal);
                break;
            }
        };
        let delta = chol.solve(&gradient);
        beta += &delta;
        last_normal = Some(normal);

        if beta.iter().any(|b| b.abs() > DIVERGENCE_BOUND) {
            diagnostic = Some(format!(
                "coefficients diverged beyond {DIVERGENCE_BOUND} at iteration {iteration}; \
                 the classes are likely separated"
            ));
            break;
        }
        if delta.amax() < TOLERANCE {
            converged = true;
            break;
        }
    }

    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!(
            "no convergence within {MAX_ITERATIONS} iterations"
        ));
    }

    // Standard errors from the final information matrix; when it cannot
    // be inverted the inference columns are NaN but the fit is returned.
    let covariance = last_normal.and_then(|m| Cholesky::new(m).map(|c| c.inverse()));
    let normal_dist = Normal::new(0.0, 1.0).expect("unit normal");
    let mut std_errors = Vec::with_capacity(d);
    let mut z_values = Vec::with_capacity(d);
    let mut p_values = Vec::with_capacity(d);
    for j in 0..d {
        let se = covariance
            .as_ref()
            .map(|c| c[(j, j)].max(0.0).sqrt())
            .unwrap_or(f64::NAN);
        let z = beta[j] / se;
        let p = if z.is_finite() {
            2.0 * (1.0 - normal_dist.cdf(z.abs()))
        } else {
            f64::NAN
        };
        std_errors.push(se);
        z_values.push(z);
        p_values.push(p);
    }

    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        z_values,
        p_values,
        converged,
        n_iterations,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn intercept_only_matches_log_odds() {
        // 30 of 100 positive: intercept = logit(0.3).
        let rows: Vec<Vec<f64>> = (0..100).map(|_| vec![1.0]).collect();
        let y: Vec<f64> = (0..100).map(|i| if i < 30 { 1.0 } else { 0.0 }).collect();
        let fit = logistic_fit(&design(&rows), &y).unwrap();
        assert!(fit.converged);
        let expected = (0.3f64 / 0.7).ln();
        assert!((fit.coefficients[0] - expected).abs() < 1e-8);
        // SE of the intercept is 1/sqrt(n p (1-p)).
        let expected_se = 1.0 / (100.0f64 * 0.3 * 0.7).sqrt();
        assert!((fit.std_errors[0] - expected_se).abs() < 1e-6);
    }

    #[test]
    fn recovers_known_slope() {
        // Noiseless logistic data on a fine grid is separated, so build a
        // balanced overlap instead: y depends stochastically via exact
        // fractions.
        let mut rows = Vec::new();
        let mut y = Vec::new();
        // At x, put round(100 * sigmoid(-1 + 2x)) positives out of 100.
        for step in -5i32..=5 {
            let x = f64::from(step) / 2.0;
            let p = sigmoid(-1.0 + 2.0 * x);
            let positives = (100.0 * p).round() as usize;
            for i in 0..100 {
                rows.push(vec![1.0, x]);
                y.push(if i < positives { 1.0 } else { 0.0 });
            }
        }
        let fit = logistic_fit(&design(&rows), &y).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] + 1.0).abs() < 0.05, "{:?}", fit.coefficients);
        assert!((fit.coefficients[1] - 2.0).abs() < 0.05, "{:?}", fit.coefficients);
        assert!(fit.p_values[1] < 1e-10);
    }

    #[test]
    fn separation_is_flagged_not_fatal() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![1.0, if i < 20 { -1.0 } else { 1.0 }])
            .collect();
        let y: Vec<f64> = (0..40).map(|i| if i < 20 { 0.0 } else { 1.0 }).collect();
        let fit = logistic_fit(&design(&rows), &y).unwrap();
        assert!(!fit.converged);
        assert!(fit.diagnostic.is_some());
    }

    #[test]
    fn constant_outcome_is_flagged() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![1.0, f64::from(i)]).collect();
        let y = vec![1.0; 30];
        let fit = logistic_fit(&design(&rows), &y).unwrap();
        assert!(!fit.converged);
        assert!(fit.diagnostic.is_some());
    }

    #[test]
    fn input_validation() {
        let x = design(&[vec![1.0], vec![1.0]]);
        assert!(matches!(
            logistic_fit(&x, &[0.5, 1.0]),
            Err(LearnError::NonBinaryOutcome)
        ));
        assert!(matches!(
            logistic_fit(&x, &[1.0]),
            Err(LearnError::LengthMismatch { .. })
        ));
        let wide = design(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            logistic_fit(&wide, &[1.0]),
            Err(LearnError::TooFewRows { .. })
        ));
    }
}
