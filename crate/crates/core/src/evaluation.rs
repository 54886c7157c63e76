//! Bootstrapped leave-one-treatment-out evaluation.
//!
//! Each grid cell hides one treatment from training and asks whether a
//! model that sees treatment vectors predicts the hidden treatment's
//! outcomes better than a covariates-only baseline. The grid nests
//! bootstrap iteration (outer), held-out treatment (middle) and embedding
//! method (inner); within a cell the baseline is trained once and shared
//! by every method.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{one_hot_embed, Method, TreatmentEmbedding, Vocabulary, DEFAULT_PCA_K};
use crate::features::{MasterRow, MasterTable};
use crate::ingest::format_float;
use crate::learners::{mse, rf_train, select_features, FeatureMatrix, ForestModel, ForestParams, LearnError};
use crate::seed::{derive_seed, tag};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("master table has no rows")]
    Empty,
    #[error("need at least 2 treatments in the master table, found {found}")]
    TooFewTreatments { found: usize },
    #[error("treatment {0:?} has no rows in the master table")]
    EmptyTreatment(String),
    #[error("method {0} requires a prebuilt embedding but none was supplied")]
    MissingEmbedding(Method),
    #[error("bad evaluation config: {0}")]
    BadConfig(String),
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

/// Settings for one evaluation run.
///
/// `treatments` empty means "hold out every treatment present in the
/// master table"; a non-empty list restricts the held-out set (training
/// still uses all other rows). `pca_k` is consumed by the embedding
/// builders upstream of the harness and carried here so one config file
/// drives the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_bootstrap: usize,
    pub seed: u64,
    pub k_features: usize,
    pub methods: Vec<Method>,
    pub pca_k: BTreeMap<Method, usize>,
    pub forest: ForestParams,
    pub treatments: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_bootstrap: 10,
            seed: 0,
            k_features: 20,
            methods: Method::ALL.to_vec(),
            pca_k: [(Method::Smiles, DEFAULT_PCA_K), (Method::Kegg, DEFAULT_PCA_K)]
                .into_iter()
                .collect(),
            forest: ForestParams::default(),
            treatments: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_bootstrap == 0 {
            return Err(EvalError::BadConfig("n_bootstrap must be at least 1".into()));
        }
        if self.k_features == 0 {
            return Err(EvalError::BadConfig("k_features must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(EvalError::BadConfig("methods must not be empty".into()));
        }
        let unique: BTreeSet<Method> = self.methods.iter().copied().collect();
        if unique.len() != self.methods.len() {
            return Err(EvalError::BadConfig("methods must not repeat".into()));
        }
        Ok(())
    }
}

/// Model column of an [`EvalRecord`]: the shared baseline or one of the
/// embedding methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMethod {
    Baseline,
    OneHot,
    Smiles,
    Kegg,
}

impl RecordMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordMethod::Baseline => "baseline",
            RecordMethod::OneHot => "one_hot",
            RecordMethod::Smiles => "smiles",
            RecordMethod::Kegg => "kegg",
        }
    }

    /// The embedding method, unless this is the baseline.
    pub fn as_method(self) -> Option<Method> {
        match self {
            RecordMethod::Baseline => None,
            RecordMethod::OneHot => Some(Method::OneHot),
            RecordMethod::Smiles => Some(Method::Smiles),
            RecordMethod::Kegg => Some(Method::Kegg),
        }
    }
}

impl From<Method> for RecordMethod {
    fn from(method: Method) -> Self {
        match method {
            Method::OneHot => RecordMethod::OneHot,
            Method::Smiles => RecordMethod::Smiles,
            Method::Kegg => RecordMethod::Kegg,
        }
    }
}

impl fmt::Display for RecordMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(RecordMethod::Baseline),
            other => Method::from_str(other).map(RecordMethod::from),
        }
    }
}

/// One test-set evaluation: a model's error on the held-out treatment.
///
/// `win` is present exactly when the record belongs to an embedding
/// method; it compares the method against the baseline of the same cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub unseen_treatment: String,
    pub method: RecordMethod,
    pub mse: f64,
    pub win: Option<u8>,
}

/// A grid cell whose bootstrap sample had no rows to split: either the
/// held-out treatment was never drawn or it swallowed the whole sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkippedCell {
    pub iteration: usize,
    pub unseen_treatment: String,
}

/// Everything a run produces: records sorted by (iteration, treatment,
/// method) and the cells that had to be skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub skips: Vec<SkippedCell>,
}

/// Draws `rows.len()` rows uniformly with replacement.
pub fn bootstrap_resample(rows: &[MasterRow], seed: u64) -> Result<Vec<MasterRow>, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..rows.len())
        .map(|_| rows[rng.gen_range(0..rows.len())].clone())
        .collect())
}

/// Splits rows into (train, test) around one held-out treatment. Returns
/// `None` when either side would be empty; the caller records a skip.
pub fn loto_split<'a>(
    rows: &'a [MasterRow],
    unseen: &str,
) -> Option<(Vec<&'a MasterRow>, Vec<&'a MasterRow>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for row in rows {
        if row.treatment == unseen {
            test.push(row);
        } else {
            train.push(row);
        }
    }
    if train.is_empty() || test.is_empty() {
        return None;
    }
    Some((train, test))
}

/// 1 iff the method's error is strictly lower than the baseline's.
///
/// Lower MSE is better, so a win certifies a genuinely better method;
/// ties go to the baseline.
pub fn win_flag(mse_method: f64, mse_baseline: f64) -> u8 {
    u8::from(mse_method < mse_baseline)
}

/// Seed for one (iteration, treatment) cell.
///
/// The treatment enters as a hash of its name rather than a list index,
/// so a run restricted to a subset of treatments or methods reproduces
/// the corresponding cells of a full run exactly.
pub fn cell_seed(seed: u64, iteration: usize, treatment: &str) -> u64 {
    derive_seed(
        seed,
        &[
            tag::CELL,
            iteration as u64,
            crate::embeddings::fnv1a64(treatment.as_bytes()),
        ],
    )
}

/// Design matrices for one cell and method: covariates first, then the
/// embedding of each row's treatment.
#[derive(Debug, Clone)]
pub struct CellFeatures {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub n_covariates: usize,
    pub embed_dim: usize,
}

fn covariate_rows(rows: &[&MasterRow]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.covariates.clone()).collect()
}

fn targets(rows: &[&MasterRow]) -> Vec<f64> {
    rows.iter().map(|r| r.target.value()).collect()
}

/// Builds train/test design matrices for one embedding method.
///
/// One-hot columns come from the train split's treatments alone, so the
/// held-out treatment maps to the zero vector. Prebuilt embeddings that
/// lack a treatment also fall back to the zero vector, with a warning.
pub fn cell_features(
    train: &[&MasterRow],
    test: &[&MasterRow],
    method: Method,
    embeddings: &BTreeMap<Method, TreatmentEmbedding>,
) -> Result<CellFeatures, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_covariates = train[0].covariates.len();
    type Lookup<'a> = Box<dyn Fn(&str) -> Vec<f64> + 'a>;
    let (embed_dim, lookup): (usize, Lookup<'_>) = match method {
        Method::OneHot => {
            let mut names: Vec<&str> = train.iter().map(|r| r.treatment.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            let vocab = Vocabulary::new(names);
            (vocab.len(), Box::new(move |t: &str| one_hot_embed(t, &vocab)))
        }
        Method::Smiles | Method::Kegg => {
            let embedding = embeddings
                .get(&method)
                .ok_or(EvalError::MissingEmbedding(method))?;
            let dim = embedding.dim();
            let missing: BTreeSet<&str> = train
                .iter()
                .chain(test)
                .map(|r| r.treatment.as_str())
                .filter(|t| embedding.get(t).is_none())
                .collect();
            for treatment in missing {
                log::warn!(
                    "treatment {treatment:?} missing from the {method} embedding, rows carry the zero vector"
                );
            }
            (
                dim,
                Box::new(move |t: &str| {
                    embedding.get(t).map_or_else(|| vec![0.0; dim], <[f64]>::to_vec)
                }),
            )
        }
    };
    let assemble = |rows: &[&MasterRow]| -> Result<FeatureMatrix, EvalError> {
        let full: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut row = r.covariates.clone();
                row.extend(lookup(&r.treatment));
                row
            })
            .collect();
        Ok(FeatureMatrix::from_rows(&full)?)
    };
    let train_x = assemble(train)?;
    let test_x = assemble(test)?;
    Ok(CellFeatures {
        train: train_x,
        test: test_x,
        n_covariates,
        embed_dim,
    })
}

/// A fitted model plus its test-set performance for one cell.
#[derive(Debug, Clone)]
pub struct ModelScore {
    /// Columns kept by feature selection, as indices into the full
    /// design matrix of this model.
    pub selected: Vec<usize>,
    pub model: ForestModel,
    pub predictions: Vec<f64>,
    pub mse: f64,
}

/// Both halves of one cell-method comparison.
#[derive(Debug, Clone)]
pub struct PairEval {
    pub baseline: ModelScore,
    pub method: ModelScore,
    pub win: u8,
}

fn fit_and_score(
    train_x: &FeatureMatrix,
    train_y: &[f64],
    test_x: &FeatureMatrix,
    test_y: &[f64],
    config: &EvalConfig,
    select_seed: u64,
    model_seed: u64,
) -> Result<ModelScore, EvalError> {
    // Selection sees only the train split; k caps at the width so narrow
    // matrices skip the selection forest entirely.
    let k = config.k_features.min(train_x.n_cols());
    let selected = select_features(train_x, train_y, k, &config.forest, select_seed)?;
    let train_sel = train_x.select_columns(&selected)?;
    let test_sel = test_x.select_columns(&selected)?;
    let model = rf_train(&train_sel, train_y, &[], &config.forest, model_seed)?;
    let predictions = model.predict(&test_sel)?;
    let mse = mse(&predictions, test_y)?;
    Ok(ModelScore {
        selected,
        model,
        predictions,
        mse,
    })
}

/// Trains and scores the covariates-only baseline for one cell.
///
/// The baseline and every method model of a cell train from the same
/// derived seeds (common random numbers), so their per-tree row draws
/// pair up and the win flag reflects features rather than sampling
/// luck. In particular a method whose embedding adds no information
/// reproduces the baseline exactly when every column is in play.
pub fn baseline_score(
    train: &[&MasterRow],
    test: &[&MasterRow],
    config: &EvalConfig,
    cell_seed: u64,
) -> Result<ModelScore, EvalError> {
    let train_x = FeatureMatrix::from_rows(&covariate_rows(train))?;
    let test_x = FeatureMatrix::from_rows(&covariate_rows(test))?;
    fit_and_score(
        &train_x,
        &targets(train),
        &test_x,
        &targets(test),
        config,
        derive_seed(cell_seed, &[tag::SELECT]),
        derive_seed(cell_seed, &[tag::MODEL]),
    )
}

/// Trains and scores one embedding-method model for one cell. Seeds are
/// shared with the cell's baseline, see [`baseline_score`].
pub fn method_score(
    train: &[&MasterRow],
    test: &[&MasterRow],
    method: Method,
    embeddings: &BTreeMap<Method, TreatmentEmbedding>,
    config: &EvalConfig,
    cell_seed: u64,
) -> Result<ModelScore, EvalError> {
    let features = cell_features(train, test, method, embeddings)?;
    fit_and_score(
        &features.train,
        &targets(train),
        &features.test,
        &targets(test),
        config,
        derive_seed(cell_seed, &[tag::SELECT]),
        derive_seed(cell_seed, &[tag::MODEL]),
    )
}

/// Evaluates one (cell, method) comparison in isolation: baseline on
/// covariates alone, method on covariates plus treatment vectors, both
/// scored on the held-out treatment.
///
/// [`run_evaluation`] derives the same seeds, so its records match what
/// this returns for the corresponding cell.
pub fn evaluate_pair(
    train: &[&MasterRow],
    test: &[&MasterRow],
    method: Method,
    embeddings: &BTreeMap<Method, TreatmentEmbedding>,
    config: &EvalConfig,
    cell_seed: u64,
) -> Result<PairEval, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty);
    }
    let baseline = baseline_score(train, test, config, cell_seed)?;
    let method = method_score(train, test, method, embeddings, config, cell_seed)?;
    let win = win_flag(method.mse, baseline.mse);
    Ok(PairEval {
        baseline,
        method,
        win,
    })
}

fn evaluate_cell(
    sample: &[MasterRow],
    iteration: usize,
    unseen: &str,
    embeddings: &BTreeMap<Method, TreatmentEmbedding>,
    config: &EvalConfig,
) -> Result<Option<Vec<EvalRecord>>, EvalError> {
    let Some((train, test)) = loto_split(sample, unseen) else {
        return Ok(None);
    };
    assert!(
        train.iter().all(|r| r.treatment != unseen),
        "train split leaked the held-out treatment"
    );
    assert!(
        test.iter().all(|r| r.treatment == unseen),
        "test split contains a foreign treatment"
    );
    let cseed = cell_seed(config.seed, iteration, unseen);
    let baseline = baseline_score(&train, &test, config, cseed)?;
    let mut records = Vec::with_capacity(1 + config.methods.len());
    records.push(EvalRecord {
        iteration,
        unseen_treatment: unseen.to_string(),
        method: RecordMethod::Baseline,
        mse: baseline.mse,
        win: None,
    });
    for &method in &config.methods {
        let score = method_score(&train, &test, method, embeddings, config, cseed)?;
        records.push(EvalRecord {
            iteration,
            unseen_treatment: unseen.to_string(),
            method: method.into(),
            mse: score.mse,
            win: Some(win_flag(score.mse, baseline.mse)),
        });
    }
    Ok(Some(records))
}

fn record_key(r: &EvalRecord) -> (usize, &str, RecordMethod) {
    (r.iteration, r.unseen_treatment.as_str(), r.method)
}

/// Verifies the structural invariants of a finished run. Cheap relative
/// to training, so it runs on every call, not only under test.
fn assert_integrity(
    records: &[EvalRecord],
    skips: &[SkippedCell],
    treatments: &[String],
    config: &EvalConfig,
) {
    let n_cells = config.n_bootstrap * treatments.len();
    let evaluated = n_cells - skips.len();
    assert_eq!(
        records.len(),
        evaluated * (1 + config.methods.len()),
        "record count must cover the full grid minus skips"
    );
    let skipped: BTreeSet<(usize, &str)> = skips
        .iter()
        .map(|s| (s.iteration, s.unseen_treatment.as_str()))
        .collect();
    let mut by_cell: BTreeMap<(usize, &str), Vec<&EvalRecord>> = BTreeMap::new();
    for record in records {
        by_cell
            .entry((record.iteration, record.unseen_treatment.as_str()))
            .or_default()
            .push(record);
    }
    for iteration in 0..config.n_bootstrap {
        for treatment in treatments {
            let key = (iteration, treatment.as_str());
            if skipped.contains(&key) {
                assert!(!by_cell.contains_key(&key), "skipped cell must have no records");
                continue;
            }
            let cell = by_cell.get(&key).expect("cell must be evaluated or skipped");
            let baselines: Vec<&&EvalRecord> = cell
                .iter()
                .filter(|r| r.method == RecordMethod::Baseline)
                .collect();
            assert_eq!(baselines.len(), 1, "exactly one baseline per cell");
            let base_mse = baselines[0].mse;
            assert!(baselines[0].win.is_none(), "baseline must not carry a win flag");
            let mut seen: BTreeSet<RecordMethod> = BTreeSet::new();
            for record in cell {
                if record.method == RecordMethod::Baseline {
                    continue;
                }
                seen.insert(record.method);
                let win = record.win.expect("method record must carry a win flag");
                assert_eq!(
                    win,
                    win_flag(record.mse, base_mse),
                    "win flag must compare against the cell's shared baseline"
                );
            }
            assert_eq!(
                seen.len(),
                config.methods.len(),
                "every configured method must appear once per cell"
            );
        }
    }
}

/// Runs the full bootstrapped grid over `table`.
///
/// One bootstrap sample is drawn per iteration and shared by all its
/// cells. Cells execute in parallel; every model seed is derived from
/// the cell alone, so the records are identical no matter the thread
/// count, and a rerun with the same config is byte-identical.
pub fn run_evaluation(
    table: &MasterTable,
    embeddings: &BTreeMap<Method, TreatmentEmbedding>,
    config: &EvalConfig,
) -> Result<EvalOutput, EvalError> {
    config.validate()?;
    if table.rows.is_empty() {
        return Err(EvalError::Empty);
    }
    for &method in &config.methods {
        if method != Method::OneHot && !embeddings.contains_key(&method) {
            return Err(EvalError::MissingEmbedding(method));
        }
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for row in &table.rows {
        *counts.entry(row.treatment.as_str()).or_insert(0) += 1;
    }
    if counts.len() < 2 {
        return Err(EvalError::TooFewTreatments { found: counts.len() });
    }
    let treatments: Vec<String> = if config.treatments.is_empty() {
        counts.keys().map(|t| t.to_string()).collect()
    } else {
        let mut list = config.treatments.clone();
        list.sort_unstable();
        list.dedup();
        for treatment in &list {
            if !counts.contains_key(treatment.as_str()) {
                return Err(EvalError::EmptyTreatment(treatment.clone()));
            }
        }
        list
    };
    let resamples: Vec<Vec<MasterRow>> = (0..config.n_bootstrap)
        .map(|i| bootstrap_resample(&table.rows, derive_seed(config.seed, &[tag::BOOTSTRAP, i as u64])))
        .collect::<Result<_, _>>()?;
    let cells: Vec<(usize, &str)> = (0..config.n_bootstrap)
        .flat_map(|i| treatments.iter().map(move |t| (i, t.as_str())))
        .collect();
    let outcomes: Vec<Option<Vec<EvalRecord>>> = cells
        .par_iter()
        .map(|&(iteration, unseen)| {
            evaluate_cell(&resamples[iteration], iteration, unseen, embeddings, config)
        })
        .collect::<Result<_, _>>()?;
    let mut records = Vec::new();
    let mut skips = Vec::new();
    for (&(iteration, unseen), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Some(cell_records) => records.extend(cell_records),
            None => skips.push(SkippedCell {
                iteration,
                unseen_treatment: unseen.to_string(),
            }),
        }
    }
    records.sort_by(|a, b| record_key(a).cmp(&record_key(b)));
    skips.sort();
    assert_integrity(&records, &skips, &treatments, config);
    Ok(EvalOutput { records, skips })
}

const RECORD_COLUMNS: [&str; 5] = ["iteration", "unseen_treatment", "method", "mse", "win"];

/// Writes records as CSV. The `win` cell is empty for baseline rows.
pub fn records_to_csv(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let csv_err = |e| EvalError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(RECORD_COLUMNS).map_err(csv_err)?;
    for record in records {
        writer
            .write_record([
                record.iteration.to_string(),
                record.unseen_treatment.clone(),
                record.method.to_string(),
                format_float(record.mse),
                record.win.map(|w| w.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Reads records written by [`records_to_csv`], revalidating the
/// win-presence invariant.
pub fn records_from_csv(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let csv_err = |e| EvalError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?;
    if headers.iter().collect::<Vec<_>>() != RECORD_COLUMNS {
        return Err(EvalError::Row {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected columns {RECORD_COLUMNS:?}, found {headers:?}"),
        });
    }
    let mut records = Vec::new();
    for result in reader.records() {
        let record = result.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |msg: String| EvalError::Row {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if record.len() != RECORD_COLUMNS.len() {
            return Err(row_err(format!("expected 5 cells, found {}", record.len())));
        }
        let iteration: usize = record[0]
            .parse()
            .map_err(|e| row_err(format!("bad iteration {:?}: {e}", &record[0])))?;
        let method = RecordMethod::from_str(&record[2]).map_err(&row_err)?;
        let mse: f64 = record[3]
            .parse()
            .map_err(|e| row_err(format!("bad mse {:?}: {e}", &record[3])))?;
        if !(mse.is_finite() && mse >= 0.0) {
            return Err(row_err(format!("mse must be finite and non-negative, got {mse}")));
        }
        let win = match (&record[4], method) {
            ("", RecordMethod::Baseline) => None,
            ("", _) => return Err(row_err("method row is missing its win flag".into())),
            (_, RecordMethod::Baseline) => {
                return Err(row_err("baseline row must not carry a win flag".into()))
            }
            (raw, _) => match raw {
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(row_err(format!("win must be 0 or 1, got {other:?}"))),
            },
        };
        records.push(EvalRecord {
            iteration,
            unseen_treatment: record[1].to_string(),
            method,
            mse,
            win,
        });
    }
    Ok(records)
}

/// Win tally for one (treatment, method) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRate {
    pub wins: usize,
    pub total: usize,
}

impl WinRate {
    pub fn percent(self) -> f64 {
        100.0 * self.wins as f64 / self.total as f64
    }
}

/// Win percentages, one row per treatment, one column per method.
#[derive(Debug, Clone, PartialEq)]
pub struct WinRateTable {
    pub treatments: Vec<String>,
    pub methods: Vec<Method>,
    /// `cells[t][m]` pairs with `treatments[t]` and `methods[m]`; `None`
    /// when every iteration for the pair was skipped.
    pub cells: Vec<Vec<Option<WinRate>>>,
}

impl WinRateTable {
    pub fn get(&self, treatment: &str, method: Method) -> Option<WinRate> {
        let t = self.treatments.iter().position(|x| x == treatment)?;
        let m = self.methods.iter().position(|&x| x == method)?;
        self.cells[t][m]
    }

    /// Writes the table as CSV with two-decimal percentages and empty
    /// cells for fully skipped pairs.
    pub fn to_csv(&self, path: &Path) -> Result<(), EvalError> {
        let csv_err = |e| EvalError::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["treatment".to_string()];
        header.extend(self.methods.iter().map(|m| m.as_str().to_string()));
        writer.write_record(&header).map_err(csv_err)?;
        for (treatment, row) in self.treatments.iter().zip(&self.cells) {
            let mut cells = vec![treatment.clone()];
            cells.extend(row.iter().map(|cell| match cell {
                Some(rate) => format!("{:.2}", rate.percent()),
                None => String::new(),
            }));
            writer.write_record(&cells).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }
}

impl fmt::Display for WinRateTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "treatment")?;
        for method in &self.methods {
            write!(f, ",{method}")?;
        }
        writeln!(f)?;
        for (treatment, row) in self.treatments.iter().zip(&self.cells) {
            write!(f, "{treatment}")?;
            for cell in row {
                match cell {
                    Some(rate) => write!(f, ",{:.2}", rate.percent())?,
                    None => write!(f, ",")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Tallies win percentages per (treatment, method) over the iterations
/// where the pair exists. Skipped cells never produce records, so they
/// are absent from both numerator and denominator.
pub fn summarize_win_rates(records: &[EvalRecord]) -> WinRateTable {
    let mut treatments: Vec<String> = records
        .iter()
        .map(|r| r.unseen_treatment.clone())
        .collect();
    treatments.sort_unstable();
    treatments.dedup();
    let mut methods: Vec<Method> = records.iter().filter_map(|r| r.method.as_method()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut cells = vec![vec![(0usize, 0usize); methods.len()]; treatments.len()];
    for record in records {
        let Some(method) = record.method.as_method() else {
            continue;
        };
        let t = treatments
            .binary_search(&record.unseen_treatment)
            .expect("treatment list was built from the records");
        let m = methods.iter().position(|&x| x == method).expect("method list was built from the records");
        let win = record.win.expect("method records carry a win flag") as usize;
        cells[t][m].0 += win;
        cells[t][m].1 += 1;
    }
    WinRateTable {
        treatments,
        methods,
        cells: cells
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(wins, total)| {
                        (total > 0).then_some(WinRate { wins, total })
                    })
                    .collect()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::TargetValue;
    use chrono::NaiveDate;

    fn row(patient: &str, treatment: &str, target: f64, covariates: Vec<f64>) -> MasterRow {
        MasterRow {
            patient_id: patient.to_string(),
            treatment: treatment.to_string(),
            block_start: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            block_end: NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(),
            covariates,
            target: TargetValue::new(target).unwrap(),
        }
    }

    /// Two treatments whose outcomes track the covariates plus a
    /// per-treatment offset. Covariates are random draws so no two
    /// columns ever tie exactly on split gain.
    fn small_table(n_per_treatment: usize) -> MasterTable {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut rows = Vec::new();
        for i in 0..n_per_treatment {
            for (treatment, bias) in [("alpha", 0.15), ("beta", 0.35)] {
                let c: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
                let target = (bias + 0.4 * c[0] + 0.15 * c[1] + 0.05 * c[2]).clamp(0.0, 1.0);
                rows.push(row(&format!("p{treatment}{i}"), treatment, target, c));
            }
        }
        MasterTable {
            feature_names: vec!["c0".into(), "c1".into(), "c2".into()],
            rows,
            degenerate_blocks: 0,
        }
    }

    fn tiny_config() -> EvalConfig {
        EvalConfig {
            n_bootstrap: 2,
            seed: 7,
            k_features: 20,
            methods: vec![Method::OneHot],
            forest: ForestParams {
                n_trees: 15,
                max_depth: 4,
                colsample_bynode: 1.0,
                min_child_weight: 0.001,
                min_samples_leaf: 1,
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn resample_preserves_size_and_repeats() {
        let table = small_table(10);
        let a = bootstrap_resample(&table.rows, 3).unwrap();
        let b = bootstrap_resample(&table.rows, 3).unwrap();
        let c = bootstrap_resample(&table.rows, 4).unwrap();
        assert_eq!(a.len(), table.rows.len());
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(bootstrap_resample(&[], 0), Err(EvalError::Empty)));
    }

    #[test]
    fn resample_distinct_fraction_matches_theory() {
        // E[distinct rows] = n(1 - (1 - 1/n)^n), about 0.634n for n=100.
        let rows: Vec<MasterRow> = (0..100)
            .map(|i| row(&format!("p{i}"), "alpha", 0.5, vec![i as f64]))
            .collect();
        let mut fractions = Vec::new();
        for seed in 0..1000u64 {
            let sample = bootstrap_resample(&rows, seed).unwrap();
            let distinct: BTreeSet<&str> = sample.iter().map(|r| r.patient_id.as_str()).collect();
            fractions.push(distinct.len() as f64 / 100.0);
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        let expected = 1.0 - (1.0 - 1.0 / 100.0f64).powi(100);
        assert!(
            (mean - expected).abs() < 0.02,
            "mean distinct fraction {mean} vs {expected}"
        );
    }

    #[test]
    fn loto_split_partitions() {
        let table = small_table(4);
        let (train, test) = loto_split(&table.rows, "alpha").unwrap();
        assert_eq!(train.len() + test.len(), table.rows.len());
        assert!(test.iter().all(|r| r.treatment == "alpha"));
        assert!(train.iter().all(|r| r.treatment == "beta"));
        assert!(loto_split(&table.rows, "gamma").is_none());
        let single = vec![row("p", "alpha", 0.5, vec![0.0])];
        assert!(loto_split(&single, "alpha").is_none());
    }

    #[test]
    fn win_flag_is_strict() {
        assert_eq!(win_flag(0.5, 0.6), 1);
        assert_eq!(win_flag(0.6, 0.5), 0);
        assert_eq!(win_flag(0.5, 0.5), 0);
    }

    #[test]
    fn one_hot_features_zero_out_unseen() {
        let table = small_table(3);
        let (train, test) = loto_split(&table.rows, "alpha").unwrap();
        let features = cell_features(&train, &test, Method::OneHot, &BTreeMap::new()).unwrap();
        assert_eq!(features.n_covariates, 3);
        assert_eq!(features.embed_dim, 1);
        for i in 0..features.test.n_rows() {
            assert_eq!(features.test.get(i, 3), 0.0);
        }
        for i in 0..features.train.n_rows() {
            assert_eq!(features.train.get(i, 3), 1.0);
        }
    }

    #[test]
    fn missing_embedding_vector_falls_back_to_zero() {
        let table = small_table(3);
        let (train, test) = loto_split(&table.rows, "alpha").unwrap();
        let vectors: BTreeMap<String, Vec<f64>> =
            [("beta".to_string(), vec![1.0, 2.0])].into_iter().collect();
        let embedding = TreatmentEmbedding::new(Method::Kegg, 2, vectors).unwrap();
        let embeddings: BTreeMap<Method, TreatmentEmbedding> =
            [(Method::Kegg, embedding)].into_iter().collect();
        let features = cell_features(&train, &test, Method::Kegg, &embeddings).unwrap();
        for i in 0..features.test.n_rows() {
            assert_eq!(features.test.get(i, 3), 0.0);
            assert_eq!(features.test.get(i, 4), 0.0);
        }
        assert_eq!(features.train.get(0, 3), 1.0);
        assert_eq!(features.train.get(0, 4), 2.0);
    }

    #[test]
    fn constant_embedding_matches_baseline_exactly() {
        // With selection disabled (k covers every column) and all columns
        // sampled at each node, a constant embedding can never split, so
        // both models grow identical trees.
        let table = small_table(12);
        let (train, test) = loto_split(&table.rows, "beta").unwrap();
        let vectors: BTreeMap<String, Vec<f64>> = [
            ("alpha".to_string(), vec![1.0, 2.0]),
            ("beta".to_string(), vec![1.0, 2.0]),
        ]
        .into_iter()
        .collect();
        let embedding = TreatmentEmbedding::new(Method::Kegg, 2, vectors).unwrap();
        let embeddings: BTreeMap<Method, TreatmentEmbedding> =
            [(Method::Kegg, embedding)].into_iter().collect();
        let config = EvalConfig {
            k_features: 100,
            methods: vec![Method::Kegg],
            ..tiny_config()
        };
        let pair = evaluate_pair(&train, &test, Method::Kegg, &embeddings, &config, 99).unwrap();
        assert_eq!(pair.baseline.predictions, pair.method.predictions);
        assert_eq!(pair.baseline.mse, pair.method.mse);
        assert_eq!(pair.win, 0);
    }

    #[test]
    fn baseline_is_shared_across_methods() {
        // Three treatments so the train split carries two distinct
        // embedding values and the method models actually diverge.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for i in 0..10 {
            for (treatment, bias) in [("alpha", 0.1), ("beta", 0.4), ("gamma", 0.7)] {
                let c: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
                let target = (bias + 0.2 * c[0] + 0.05 * c[1]).clamp(0.0, 1.0);
                rows.push(row(&format!("p{treatment}{i}"), treatment, target, c));
            }
        }
        let (train, test) = loto_split(&rows, "alpha").unwrap();
        let vectors: BTreeMap<String, Vec<f64>> = [
            ("alpha".to_string(), vec![0.3]),
            ("beta".to_string(), vec![0.9]),
            ("gamma".to_string(), vec![0.1]),
        ]
        .into_iter()
        .collect();
        let embedding = TreatmentEmbedding::new(Method::Smiles, 1, vectors).unwrap();
        let embeddings: BTreeMap<Method, TreatmentEmbedding> =
            [(Method::Smiles, embedding)].into_iter().collect();
        let config = EvalConfig {
            methods: vec![Method::OneHot, Method::Smiles],
            ..tiny_config()
        };
        let a = evaluate_pair(&train, &test, Method::OneHot, &embeddings, &config, 42).unwrap();
        let b = evaluate_pair(&train, &test, Method::Smiles, &embeddings, &config, 42).unwrap();
        assert_eq!(a.baseline.mse, b.baseline.mse);
        assert_eq!(a.baseline.predictions, b.baseline.predictions);
        assert_ne!(a.method.mse, b.method.mse);
    }

    #[test]
    fn run_produces_full_grid() {
        // n_bootstrap=1, 2 treatments, 1 method: 2 win records + 2 baselines.
        let table = small_table(10);
        let config = EvalConfig {
            n_bootstrap: 1,
            ..tiny_config()
        };
        let output = run_evaluation(&table, &BTreeMap::new(), &config).unwrap();
        assert!(output.skips.is_empty());
        assert_eq!(output.records.len(), 4);
        let wins: Vec<&EvalRecord> = output.records.iter().filter(|r| r.win.is_some()).collect();
        assert_eq!(wins.len(), 2);
        assert!(output
            .records
            .iter()
            .filter(|r| r.method == RecordMethod::Baseline)
            .all(|r| r.win.is_none()));
    }

    #[test]
    fn rerun_is_identical_and_sorted() {
        let table = small_table(10);
        let config = tiny_config();
        let a = run_evaluation(&table, &BTreeMap::new(), &config).unwrap();
        let b = run_evaluation(&table, &BTreeMap::new(), &config).unwrap();
        assert_eq!(a, b);
        let keys: Vec<_> = a.records.iter().map(record_key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn subset_run_reproduces_full_run_cells() {
        let table = small_table(10);
        let full = run_evaluation(&table, &BTreeMap::new(), &tiny_config()).unwrap();
        let config = EvalConfig {
            treatments: vec!["beta".to_string()],
            ..tiny_config()
        };
        let subset = run_evaluation(&table, &BTreeMap::new(), &config).unwrap();
        let full_beta: Vec<&EvalRecord> = full
            .records
            .iter()
            .filter(|r| r.unseen_treatment == "beta")
            .collect();
        assert_eq!(subset.records.len(), full_beta.len());
        for (s, f) in subset.records.iter().zip(full_beta) {
            assert_eq!(s, f);
        }
    }

    #[test]
    fn startup_errors() {
        let table = small_table(5);
        let config = EvalConfig {
            treatments: vec!["gamma".to_string()],
            ..tiny_config()
        };
        assert!(matches!(
            run_evaluation(&table, &BTreeMap::new(), &config),
            Err(EvalError::EmptyTreatment(t)) if t == "gamma"
        ));
        let mut single = small_table(5);
        single.rows.retain(|r| r.treatment == "alpha");
        assert!(matches!(
            run_evaluation(&single, &BTreeMap::new(), &tiny_config()),
            Err(EvalError::TooFewTreatments { found: 1 })
        ));
        let no_methods = EvalConfig {
            methods: Vec::new(),
            ..tiny_config()
        };
        assert!(matches!(
            run_evaluation(&table, &BTreeMap::new(), &no_methods),
            Err(EvalError::BadConfig(_))
        ));
        let kegg_only = EvalConfig {
            methods: vec![Method::Kegg],
            ..tiny_config()
        };
        assert!(matches!(
            run_evaluation(&table, &BTreeMap::new(), &kegg_only),
            Err(EvalError::MissingEmbedding(Method::Kegg))
        ));
    }

    #[test]
    fn rare_treatment_cells_are_skipped() {
        // One rho row among 40: some bootstrap samples miss it entirely.
        let mut table = small_table(20);
        table.rows.push(row("pr", "rho", 0.5, vec![0.1, 0.2, 0.3]));
        let config = EvalConfig {
            n_bootstrap: 12,
            ..tiny_config()
        };
        let output = run_evaluation(&table, &BTreeMap::new(), &config).unwrap();
        assert!(
            !output.skips.is_empty(),
            "expected at least one bootstrap sample without the single rho row"
        );
        assert!(output.skips.iter().all(|s| s.unseen_treatment == "rho"));
        let rho_records: Vec<&EvalRecord> = output
            .records
            .iter()
            .filter(|r| r.unseen_treatment == "rho")
            .collect();
        let evaluated = config.n_bootstrap - output.skips.len();
        assert_eq!(rho_records.len(), evaluated * 2);
        let table = summarize_win_rates(&output.records);
        let rate = table.get("rho", Method::OneHot).unwrap();
        assert_eq!(rate.total, evaluated);
    }

    #[test]
    fn records_csv_roundtrip_is_byte_identical() {
        let table = small_table(10);
        let output = run_evaluation(&table, &BTreeMap::new(), &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.csv");
        let path_b = dir.path().join("b.csv");
        records_to_csv(&path_a, &output.records).unwrap();
        records_to_csv(&path_b, &output.records).unwrap();
        let bytes_a = std::fs::read(&path_a).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let back = records_from_csv(&path_a).unwrap();
        assert_eq!(back, output.records);
    }

    #[test]
    fn records_csv_rejects_invariant_violations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "iteration,unseen_treatment,method,mse,win\n0,alpha,baseline,0.5,1\n",
        )
        .unwrap();
        assert!(matches!(records_from_csv(&path), Err(EvalError::Row { .. })));
        std::fs::write(
            &path,
            "iteration,unseen_treatment,method,mse,win\n0,alpha,one_hot,0.5,\n",
        )
        .unwrap();
        assert!(matches!(records_from_csv(&path), Err(EvalError::Row { .. })));
        std::fs::write(&path, "iteration,method,mse,win\n").unwrap();
        assert!(matches!(records_from_csv(&path), Err(EvalError::Row { line: 1, .. })));
    }

    #[test]
    fn win_rates_tally_and_format() {
        let mut records = Vec::new();
        for iteration in 0..10 {
            records.push(EvalRecord {
                iteration,
                unseen_treatment: "alpha".into(),
                method: RecordMethod::Baseline,
                mse: 0.5,
                win: None,
            });
            records.push(EvalRecord {
                iteration,
                unseen_treatment: "alpha".into(),
                method: RecordMethod::Kegg,
                mse: 0.4,
                win: Some(u8::from(iteration < 4)),
            });
            records.push(EvalRecord {
                iteration,
                unseen_treatment: "alpha".into(),
                method: RecordMethod::OneHot,
                mse: 0.4,
                win: Some(1),
            });
        }
        let table = summarize_win_rates(&records);
        assert_eq!(table.treatments, vec!["alpha".to_string()]);
        assert_eq!(table.methods, vec![Method::OneHot, Method::Kegg]);
        let kegg = table.get("alpha", Method::Kegg).unwrap();
        assert_eq!((kegg.wins, kegg.total), (4, 10));
        assert_eq!(table.get("alpha", Method::OneHot).unwrap().percent(), 100.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("win_rates.csv");
        table.to_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "treatment,one_hot,kegg\nalpha,100.00,40.00\n");
    }
}
