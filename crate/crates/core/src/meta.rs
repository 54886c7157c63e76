//! Meta-analysis: does embedding-space novelty of the held-out treatment
//! predict whether its model beat the baseline?
//!
//! The unit of analysis is one (iteration, treatment) pair. Each pair
//! carries the chosen method's win flag and four distance covariates
//! measuring how far the treatment sits from the others in embedding
//! space; four separate univariate logistic regressions link the flag to
//! each covariate.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{novelty_features, EmbedError, Method, TreatmentEmbedding};
use crate::evaluation::{EvalRecord, RecordMethod};
use crate::ingest::format_float;
use crate::learners::{logistic_fit, FeatureMatrix, LearnError};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("no {0} records to analyze")]
    MethodAbsent(Method),
    #[error("treatment {0:?} is missing from the embedding")]
    MissingTreatment(String),
    #[error("every win flag is {0}, regression outcome is degenerate")]
    DegenerateOutcome(u8),
    #[error("meta table is empty")]
    Empty,
    #[error("embed: {0}")]
    Embed(#[from] EmbedError),
    #[error("learner: {0}")]
    Learn(#[from] LearnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}, line {line}: {msg}")]
    Row {
        path: PathBuf,
        line: u64,
        msg: String,
    },
}

/// One (iteration, treatment) observation. The distance fields depend
/// only on the treatment and the embedding, never on the bootstrap
/// sample, so they repeat across iterations of the same treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub iteration: usize,
    pub unseen_treatment: String,
    pub win: u8,
    pub min_eucl: f64,
    pub min_cosine: f64,
    pub eucl_to_mean: f64,
    pub cosine_to_mean: f64,
}

/// The four novelty covariates, in the order the regressions report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaCovariate {
    MinCosine,
    MinEucl,
    CosineToMean,
    EuclToMean,
}

impl MetaCovariate {
    pub const ALL: [MetaCovariate; 4] = [
        MetaCovariate::MinCosine,
        MetaCovariate::MinEucl,
        MetaCovariate::CosineToMean,
        MetaCovariate::EuclToMean,
    ];

    /// Column name in the meta table for a given method.
    pub fn column_name(self, method: Method) -> String {
        match self {
            MetaCovariate::MinCosine => format!("min_{method}_cosine_dist_to_others"),
            MetaCovariate::MinEucl => format!("min_{method}_eucl_dist_to_others"),
            MetaCovariate::CosineToMean => format!("{method}_cosine_dist_to_mean"),
            MetaCovariate::EuclToMean => format!("{method}_eucl_dist_to_mean"),
        }
    }
}

impl MetaRow {
    pub fn covariate(&self, covariate: MetaCovariate) -> f64 {
        match covariate {
            MetaCovariate::MinCosine => self.min_cosine,
            MetaCovariate::MinEucl => self.min_eucl,
            MetaCovariate::CosineToMean => self.cosine_to_mean,
            MetaCovariate::EuclToMean => self.eucl_to_mean,
        }
    }
}

/// Name of the win-flag column for a given method.
pub fn win_column(method: Method) -> String {
    format!("ft_{method}_embeddings_perf_higher_than_ft_no_treatment")
}

/// Builds one row per (iteration, treatment) pair of the chosen method.
///
/// Novelty distances compare the treatment's vector against the vectors
/// of every other treatment appearing in the records, so a treatment's
/// distances are identical in every iteration. Skipped evaluation cells
/// have no record and therefore no row.
pub fn build_meta_table(
    records: &[EvalRecord],
    embedding: &TreatmentEmbedding,
    method: Method,
) -> Result<Vec<MetaRow>, MetaError> {
    let wanted = RecordMethod::from(method);
    let method_records: Vec<&EvalRecord> =
        records.iter().filter(|r| r.method == wanted).collect();
    if method_records.is_empty() {
        return Err(MetaError::MethodAbsent(method));
    }
    let mut treatments: Vec<&str> = method_records
        .iter()
        .map(|r| r.unseen_treatment.as_str())
        .collect();
    treatments.sort_unstable();
    treatments.dedup();
    let mut vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &treatment in &treatments {
        let vector = embedding
            .get(treatment)
            .ok_or_else(|| MetaError::MissingTreatment(treatment.to_string()))?;
        vectors.insert(treatment, vector.to_vec());
    }
    let mut novelty = BTreeMap::new();
    for &treatment in &treatments {
        let others: Vec<Vec<f64>> = treatments
            .iter()
            .filter(|&&t| t != treatment)
            .map(|&t| vectors[t].clone())
            .collect();
        novelty.insert(treatment, novelty_features(&vectors[treatment], &others)?);
    }
    let mut rows: Vec<MetaRow> = method_records
        .iter()
        .map(|record| {
            let features = &novelty[record.unseen_treatment.as_str()];
            MetaRow {
                iteration: record.iteration,
                unseen_treatment: record.unseen_treatment.clone(),
                win: record.win.expect("method records carry a win flag"),
                min_eucl: features.min_eucl,
                min_cosine: features.min_cosine,
                eucl_to_mean: features.eucl_to_mean,
                cosine_to_mean: features.cosine_to_mean,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.iteration, a.unseen_treatment.as_str()).cmp(&(b.iteration, b.unseen_treatment.as_str()))
    });
    Ok(rows)
}

fn meta_columns(method: Method) -> [String; 7] {
    [
        "iteration".to_string(),
        "unseen_treatment".to_string(),
        win_column(method),
        MetaCovariate::MinEucl.column_name(method),
        MetaCovariate::MinCosine.column_name(method),
        MetaCovariate::EuclToMean.column_name(method),
        MetaCovariate::CosineToMean.column_name(method),
    ]
}

/// Writes the meta table with method-specific column names.
pub fn meta_table_to_csv(path: &Path, rows: &[MetaRow], method: Method) -> Result<(), MetaError> {
    let csv_err = |e| MetaError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(meta_columns(method)).map_err(csv_err)?;
    for row in rows {
        writer
            .write_record([
                row.iteration.to_string(),
                row.unseen_treatment.clone(),
                row.win.to_string(),
                format_float(row.min_eucl),
                format_float(row.min_cosine),
                format_float(row.eucl_to_mean),
                format_float(row.cosine_to_mean),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| MetaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Reads a meta table written by [`meta_table_to_csv`] for the same
/// method.
pub fn meta_table_from_csv(path: &Path, method: Method) -> Result<Vec<MetaRow>, MetaError> {
    let csv_err = |e| MetaError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?;
    let expected = meta_columns(method);
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(MetaError::Row {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected columns {expected:?}, found {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |msg: String| MetaError::Row {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let cell = |i: usize| -> Result<f64, MetaError> {
            record[i]
                .parse::<f64>()
                .map_err(|e| row_err(format!("bad number {:?}: {e}", &record[i])))
                .and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(row_err(format!("non-finite value {v}")))
                    }
                })
        };
        let win = match &record[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(row_err(format!("win must be 0 or 1, got {other:?}"))),
        };
        rows.push(MetaRow {
            iteration: record[0]
                .parse()
                .map_err(|e| row_err(format!("bad iteration {:?}: {e}", &record[0])))?,
            unseen_treatment: record[1].to_string(),
            win,
            min_eucl: cell(3)?,
            min_cosine: cell(4)?,
            eucl_to_mean: cell(5)?,
            cosine_to_mean: cell(6)?,
        });
    }
    Ok(rows)
}

/// Point estimate and Wald inference for one regression term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p: f64,
}

/// One univariate logistic fit: win flag on an intercept plus a single
/// novelty covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub covariate: MetaCovariate,
    pub intercept: Coefficient,
    pub slope: Coefficient,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

/// All four regressions for one method's win flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    pub method: Method,
    pub n: usize,
    pub regressions: Vec<RegressionReport>,
}

fn fit_one(table: &[MetaRow], covariate: MetaCovariate) -> Result<RegressionReport, MetaError> {
    let rows: Vec<Vec<f64>> = table
        .iter()
        .map(|r| vec![1.0, r.covariate(covariate)])
        .collect();
    let x = FeatureMatrix::from_rows(&rows)?;
    let y: Vec<f64> = table.iter().map(|r| f64::from(r.win)).collect();
    let fit = logistic_fit(&x, &y)?;
    let term = |i: usize| Coefficient {
        estimate: fit.coefficients[i],
        std_error: fit.std_errors[i],
        z: fit.z_values[i],
        p: fit.p_values[i],
    };
    Ok(RegressionReport {
        covariate,
        intercept: term(0),
        slope: term(1),
        converged: fit.converged,
        diagnostic: fit.diagnostic,
    })
}

/// Runs the four univariate logistic regressions of the win flag on the
/// novelty covariates. Requires both outcomes to be present; quasi- or
/// complete separation is passed through as a fit diagnostic rather
/// than an error.
pub fn run_meta_regressions(table: &[MetaRow], method: Method) -> Result<MetaReport, MetaError> {
    if table.is_empty() {
        return Err(MetaError::Empty);
    }
    if table.iter().all(|r| r.win == 1) {
        return Err(MetaError::DegenerateOutcome(1));
    }
    if table.iter().all(|r| r.win == 0) {
        return Err(MetaError::DegenerateOutcome(0));
    }
    let regressions = MetaCovariate::ALL
        .iter()
        .map(|&covariate| fit_one(table, covariate))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetaReport {
        method,
        n: table.len(),
        regressions,
    })
}

impl fmt::Display for MetaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "win flag: {} (n = {})",
            win_column(self.method),
            self.n
        )?;
        for report in &self.regressions {
            writeln!(f)?;
            writeln!(f, "covariate: {}", report.covariate.column_name(self.method))?;
            writeln!(
                f,
                "  {:<10} {:>12} {:>12} {:>9} {:>9}",
                "term", "estimate", "std_error", "z", "p"
            )?;
            for (name, c) in [("intercept", report.intercept), ("slope", report.slope)] {
                writeln!(
                    f,
                    "  {:<10} {:>12.6} {:>12.6} {:>9.4} {:>9.4}",
                    name, c.estimate, c.std_error, c.z, c.p
                )?;
            }
            if !report.converged {
                writeln!(f, "  warning: fit did not converge")?;
            }
            if let Some(diagnostic) = &report.diagnostic {
                writeln!(f, "  note: {diagnostic}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn record(iteration: usize, treatment: &str, method: RecordMethod, win: Option<u8>) -> EvalRecord {
        EvalRecord {
            iteration,
            unseen_treatment: treatment.to_string(),
            method,
            mse: 0.1,
            win,
        }
    }

    fn square_embedding() -> TreatmentEmbedding {
        // Four points on a unit square; distances are easy to hand-check.
        let vectors: BTreeMap<String, Vec<f64>> = [
            ("a".to_string(), vec![0.0, 0.0]),
            ("b".to_string(), vec![1.0, 0.0]),
            ("c".to_string(), vec![0.0, 1.0]),
            ("d".to_string(), vec![1.0, 1.0]),
        ]
        .into_iter()
        .collect();
        TreatmentEmbedding::new(Method::Kegg, 2, vectors).unwrap()
    }

    fn grid_records(iterations: usize, treatments: &[&str]) -> Vec<EvalRecord> {
        let mut records = Vec::new();
        for i in 0..iterations {
            for (k, t) in treatments.iter().enumerate() {
                records.push(record(i, t, RecordMethod::Baseline, None));
                records.push(record(i, t, RecordMethod::Kegg, Some(((i + k) % 2) as u8)));
            }
        }
        records
    }

    #[test]
    fn table_has_one_row_per_pair_and_repeats_distances() {
        let records = grid_records(3, &["a", "b", "c", "d"]);
        let table = build_meta_table(&records, &square_embedding(), Method::Kegg).unwrap();
        assert_eq!(table.len(), 12);
        let first: Vec<&MetaRow> = table.iter().filter(|r| r.unseen_treatment == "b").collect();
        assert_eq!(first.len(), 3);
        assert!(first.windows(2).all(|w| {
            w[0].min_eucl == w[1].min_eucl
                && w[0].min_cosine == w[1].min_cosine
                && w[0].eucl_to_mean == w[1].eucl_to_mean
                && w[0].cosine_to_mean == w[1].cosine_to_mean
        }));
        // Nearest neighbours of (0,0) among the other corners sit at
        // distance 1.
        let a = table.iter().find(|r| r.unseen_treatment == "a").unwrap();
        assert!((a.min_eucl - 1.0).abs() < 1e-12);
        // Mean of all four corners is (0.5, 0.5), sqrt(0.5) from (0,0).
        assert!((a.eucl_to_mean - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn skipped_cells_produce_no_rows() {
        let mut records = grid_records(2, &["a", "b"]);
        // Drop the cell (1, "b") as an evaluation skip would.
        records.retain(|r| !(r.iteration == 1 && r.unseen_treatment == "b"));
        let table = build_meta_table(&records, &square_embedding(), Method::Kegg).unwrap();
        assert_eq!(table.len(), 3);
    }

    #[test]
    fn missing_treatment_and_method_errors() {
        let records = grid_records(1, &["a", "zzz"]);
        assert!(matches!(
            build_meta_table(&records, &square_embedding(), Method::Kegg),
            Err(MetaError::MissingTreatment(t)) if t == "zzz"
        ));
        let records = grid_records(1, &["a", "b"]);
        assert!(matches!(
            build_meta_table(&records, &square_embedding(), Method::Smiles),
            Err(MetaError::MethodAbsent(Method::Smiles))
        ));
    }

    fn planted_table(n: usize, seed: u64) -> Vec<MetaRow> {
        // Win probability falls with distance: sigmoid(2 - 6 d).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let d: f64 = rng.gen();
                let p = 1.0 / (1.0 + (6.0 * d - 2.0).exp());
                let win = u8::from(rng.gen::<f64>() < p);
                MetaRow {
                    iteration: i,
                    unseen_treatment: format!("t{i}"),
                    win,
                    min_eucl: d,
                    min_cosine: d,
                    eucl_to_mean: d,
                    cosine_to_mean: d,
                }
            })
            .collect()
    }

    #[test]
    fn planted_negative_relationship_is_detected() {
        let table = planted_table(400, 11);
        let report = run_meta_regressions(&table, Method::Kegg).unwrap();
        assert_eq!(report.n, 400);
        assert_eq!(report.regressions.len(), 4);
        for regression in &report.regressions {
            assert!(regression.converged);
            assert!(
                regression.slope.estimate < 0.0,
                "{:?} slope {}",
                regression.covariate,
                regression.slope.estimate
            );
            assert!(regression.slope.p < 0.01);
        }
    }

    #[test]
    fn permuted_labels_rarely_look_significant() {
        let base = planted_table(120, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut calm = 0;
        for _ in 0..100 {
            let mut table = base.clone();
            // Fisher-Yates over the win labels breaks any distance link.
            for i in (1..table.len()).rev() {
                let j = rng.gen_range(0..=i);
                let tmp = table[i].win;
                table[i].win = table[j].win;
                table[j].win = tmp;
            }
            let report = run_meta_regressions(&table, Method::Kegg).unwrap();
            if report.regressions[0].slope.z.abs() < 1.96 {
                calm += 1;
            }
        }
        assert!(calm >= 90, "only {calm} of 100 permutations stayed inside the null band");
    }

    #[test]
    fn degenerate_outcomes_error() {
        let mut table = planted_table(50, 4);
        for row in &mut table {
            row.win = 1;
        }
        assert!(matches!(
            run_meta_regressions(&table, Method::Kegg),
            Err(MetaError::DegenerateOutcome(1))
        ));
        for row in &mut table {
            row.win = 0;
        }
        assert!(matches!(
            run_meta_regressions(&table, Method::Kegg),
            Err(MetaError::DegenerateOutcome(0))
        ));
        assert!(matches!(
            run_meta_regressions(&[], Method::Kegg),
            Err(MetaError::Empty)
        ));
    }

    #[test]
    fn affine_rescaling_preserves_inference() {
        let table = planted_table(300, 8);
        let report = run_meta_regressions(&table, Method::Kegg).unwrap();
        let scaled: Vec<MetaRow> = table
            .iter()
            .map(|r| MetaRow {
                min_cosine: 3.7 * r.min_cosine - 1.2,
                ..r.clone()
            })
            .collect();
        let scaled_report = run_meta_regressions(&scaled, Method::Kegg).unwrap();
        let before = &report.regressions[0];
        let after = &scaled_report.regressions[0];
        assert_eq!(before.covariate, MetaCovariate::MinCosine);
        assert!((after.slope.estimate - before.slope.estimate / 3.7).abs() < 1e-6);
        assert!((after.slope.z - before.slope.z).abs() < 1e-6);
        assert!((after.slope.p - before.slope.p).abs() < 1e-6);
    }

    #[test]
    fn csv_roundtrip_with_method_columns() {
        let records = grid_records(2, &["a", "b", "c"]);
        let table = build_meta_table(&records, &square_embedding(), Method::Kegg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta_table.csv");
        meta_table_to_csv(&path, &table, Method::Kegg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "iteration,unseen_treatment,\
             ft_kegg_embeddings_perf_higher_than_ft_no_treatment,\
             min_kegg_eucl_dist_to_others,min_kegg_cosine_dist_to_others,\
             kegg_eucl_dist_to_mean,kegg_cosine_dist_to_mean"
        );
        let back = meta_table_from_csv(&path, Method::Kegg).unwrap();
        assert_eq!(back, table);
        assert!(matches!(
            meta_table_from_csv(&path, Method::Smiles),
            Err(MetaError::Row { line: 1, .. })
        ));
    }
}
