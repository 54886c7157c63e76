//! TFIDF weighting for token count matrices.
//!
//! `tf` is the raw count. `idf(t) = ln((1 + N) / (1 + df(t))) + 1` where `N`
//! is the number of rows and `df(t)` the number of rows where token `t`
//! appears. Weighted rows are L2-normalized; all-zero rows stay all-zero.

use super::EmbedError;

pub fn tfidf_transform(counts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EmbedError> {
    let n = counts.len();
    if n == 0 {
        return Err(EmbedError::Empty);
    }
    let d = counts[0].len();
    if counts.iter().any(|r| r.len() != d) {
        return Err(EmbedError::Ragged);
    }
    if counts.iter().flatten().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(EmbedError::BadParams("counts must be finite and nonnegative".into()));
    }

    let mut idf = vec![0.0; d];
    for (t, w) in idf.iter_mut().enumerate() {
        let df = counts.iter().filter(|row| row[t] > 0.0).count();
        *w = ((1 + n) as f64 / (1 + df) as f64).ln() + 1.0;
    }

    let mut out = Vec::with_capacity(n);
    for row in counts {
        let mut weighted: Vec<f64> = row.iter().zip(&idf).map(|(c, w)| c * w).collect();
        let norm = weighted.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut weighted {
                *v /= norm;
            }
        }
        out.push(weighted);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn token_in_every_row_gets_idf_one() {
        // 3x2, both tokens in every row with count 1: idf = ln(4/4)+1 = 1,
        // each row normalizes to (1/sqrt2, 1/sqrt2).
        let counts = vec![vec![1.0, 1.0]; 3];
        let out = tfidf_transform(&counts).unwrap();
        let e = 1.0 / 2.0f64.sqrt();
        for row in out {
            assert_abs_diff_eq!(row[0], e, epsilon = 1e-12);
            assert_abs_diff_eq!(row[1], e, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_row_is_count_direction() {
        // N = 1: idf = ln(2/2)+1 = 1 for present tokens, so the row is just
        // the counts L2-normalized.
        let counts = vec![vec![3.0, 0.0, 4.0]];
        let out = tfidf_transform(&counts).unwrap();
        assert_abs_diff_eq!(out[0][0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0][1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0][2], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let counts = vec![vec![0.0; 4]; 3];
        let out = tfidf_transform(&counts).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_smoothed_idf() {
        // 3 rows; token 0 in one row, token 1 in two rows.
        // idf0 = ln(4/2)+1, idf1 = ln(4/3)+1.
        let counts = vec![vec![2.0, 1.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let out = tfidf_transform(&counts).unwrap();
        let idf0 = (4.0f64 / 2.0).ln() + 1.0;
        let idf1 = (4.0f64 / 3.0).ln() + 1.0;
        let norm = (4.0 * idf0 * idf0 + idf1 * idf1).sqrt();
        assert_abs_diff_eq!(out[0][0], 2.0 * idf0 / norm, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0][1], idf1 / norm, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1][1], 1.0, epsilon = 1e-12);
        assert!(out[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_scaling_cancels() {
        let base = vec![vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 5.0]];
        let scaled = vec![
            base[0].iter().map(|v| v * 7.5).collect::<Vec<_>>(),
            base[1].clone(),
        ];
        let a = tfidf_transform(&base).unwrap();
        let b = tfidf_transform(&scaled).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(matches!(tfidf_transform(&[]), Err(EmbedError::Empty)));
        let ragged = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(matches!(tfidf_transform(&ragged), Err(EmbedError::Ragged)));
        let negative = vec![vec![-1.0]];
        assert!(matches!(
            tfidf_transform(&negative),
            Err(EmbedError::BadParams(_))
        ));
    }
}
