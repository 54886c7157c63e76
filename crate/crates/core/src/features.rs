//! Lookback covariates evaluated at a block's start date, and the master
//! table that joins them with targets.
//!
//! Every covariate is defined by a [`FeatureSpec`]: a set of event codes,
//! an aggregation (presence flag or count), and a lookback window ending
//! just before the index date. Age and gender are always prepended, so a
//! covariate vector has length `2 + specs.len()`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{TargetValue, TreatmentBlock};
use crate::ingest::{Demographics, EventRecord};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature {name:?} has an empty code set")]
    EmptyCodes { name: String },
    #[error("feature {name:?} has a zero-month window")]
    ZeroMonths { name: String },
    #[error("duplicate feature name {name:?}")]
    DuplicateName { name: String },
    #[error("feature name {name:?} collides with a reserved master table column")]
    ReservedName { name: String },
    #[error("no demographics for patient {patient_id:?}")]
    MissingDemographics { patient_id: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: csv error: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Row {
        path: PathBuf,
        line: u64,
        msg: String,
    },
}

/// How matching events are aggregated into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// 1.0 if any matching event exists in the window, else 0.0.
    BinaryPresence,
    /// Number of matching events in the window.
    Count,
}

/// Lookback window relative to the index date `as_of`. All windows end
/// strictly before `as_of`, so nothing on the index date itself leaks in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// The single day before the index date.
    AtIndex,
    /// The `30 * months` days before the index date.
    LastMonths(u32),
    /// Everything before the index date.
    Lifetime,
}

/// One covariate definition: which codes, how to aggregate, over which
/// window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub codes: Vec<String>,
    pub window: Window,
}

const RESERVED_COLUMNS: [&str; 5] = ["patient_id", "treatment", "block_start", "block_end", "target"];

fn validate_specs(specs: &[FeatureSpec]) -> Result<(), FeatureError> {
    let mut seen = std::collections::BTreeSet::new();
    for spec in specs {
        if spec.codes.is_empty() {
            return Err(FeatureError::EmptyCodes {
                name: spec.name.clone(),
            });
        }
        if let Window::LastMonths(0) = spec.window {
            return Err(FeatureError::ZeroMonths {
                name: spec.name.clone(),
            });
        }
        if RESERVED_COLUMNS.contains(&spec.name.as_str()) || spec.name == "age" || spec.name == "gender"
        {
            return Err(FeatureError::ReservedName {
                name: spec.name.clone(),
            });
        }
        if !seen.insert(spec.name.as_str()) {
            return Err(FeatureError::DuplicateName {
                name: spec.name.clone(),
            });
        }
    }
    Ok(())
}

/// Loads feature specs from a JSON array and validates them: nonempty
/// code sets, positive month windows, unique non-reserved names.
pub fn load_feature_specs(path: &Path) -> Result<Vec<FeatureSpec>, FeatureError> {
    let text = std::fs::read_to_string(path).map_err(|e| FeatureError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let specs: Vec<FeatureSpec> = serde_json::from_str(&text).map_err(|e| FeatureError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    validate_specs(&specs)?;
    Ok(specs)
}

/// Writes feature specs as pretty JSON.
pub fn save_feature_specs(path: &Path, specs: &[FeatureSpec]) -> Result<(), FeatureError> {
    validate_specs(specs)?;
    let text = serde_json::to_string_pretty(specs).expect("specs serialize");
    std::fs::write(path, text).map_err(|e| FeatureError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One month of lookback is a fixed 30 days.
const DAYS_PER_MONTH: i64 = 30;

fn window_floor(window: Window, as_of: NaiveDate) -> Option<NaiveDate> {
    match window {
        Window::AtIndex => Some(as_of - chrono::Duration::days(1)),
        Window::LastMonths(months) => {
            Some(as_of - chrono::Duration::days(DAYS_PER_MONTH * i64::from(months)))
        }
        Window::Lifetime => None,
    }
}

/// Aggregates one feature for one patient at `as_of`.
///
/// An event matches when its code is in the spec's code set and its date
/// lies in `[floor, as_of)` where the floor depends on the window. Event
/// kind is not consulted; code sets already imply it.
pub fn lookback_aggregate(
    events: &[EventRecord],
    patient_id: &str,
    spec: &FeatureSpec,
    as_of: NaiveDate,
) -> f64 {
    let floor = window_floor(spec.window, as_of);
    let mut count = 0u64;
    for event in events {
        if event.patient_id != patient_id || event.date >= as_of {
            continue;
        }
        if let Some(floor) = floor {
            if event.date < floor {
                continue;
            }
        }
        if spec.codes.iter().any(|c| c == &event.code) {
            count += 1;
            if spec.kind == FeatureKind::BinaryPresence {
                return 1.0;
            }
        }
    }
    match spec.kind {
        FeatureKind::BinaryPresence => 0.0,
        FeatureKind::Count => count as f64,
    }
}

/// Column names of the covariate vector: age, gender, then the specs in
/// order.
pub fn covariate_names(specs: &[FeatureSpec]) -> Vec<String> {
    let mut names = Vec::with_capacity(specs.len() + 2);
    names.push("age".to_string());
    names.push("gender".to_string());
    names.extend(specs.iter().map(|s| s.name.clone()));
    names
}

fn age_years(birth: NaiveDate, as_of: NaiveDate) -> f64 {
    let mut years = as_of.year() - birth.year();
    if (as_of.month(), as_of.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    years as f64
}

/// Builds the covariate vector for a block: completed years of age at the
/// block start, encoded gender, then each spec aggregated at the block
/// start. Fails when the patient has no demographics row.
pub fn assemble_covariates(
    block: &TreatmentBlock,
    patient_events: &[EventRecord],
    specs: &[FeatureSpec],
    demographics: &BTreeMap<String, Demographics>,
) -> Result<Vec<f64>, FeatureError> {
    let demo = demographics
        .get(&block.patient_id)
        .ok_or_else(|| FeatureError::MissingDemographics {
            patient_id: block.patient_id.clone(),
        })?;
    let mut covariates = Vec::with_capacity(specs.len() + 2);
    covariates.push(age_years(demo.birth_date, block.start));
    covariates.push(demo.gender.encoded());
    for spec in specs {
        covariates.push(lookback_aggregate(
            patient_events,
            &block.patient_id,
            spec,
            block.start,
        ));
    }
    Ok(covariates)
}

/// One modelling row: block identity, covariates, target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterRow {
    pub patient_id: String,
    pub treatment: String,
    pub block_start: NaiveDate,
    pub block_end: NaiveDate,
    pub covariates: Vec<f64>,
    pub target: TargetValue,
}

/// The modelling table: shared covariate names plus one row per
/// non-degenerate block.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<MasterRow>,
    pub degenerate_blocks: usize,
}

/// Writes the master table with fixed identity columns followed by one
/// column per covariate.
pub fn master_table_to_csv(path: &Path, table: &MasterTable) -> Result<(), FeatureError> {
    let csv_err = |e| FeatureError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<&str> = vec!["patient_id", "treatment", "block_start", "block_end", "target"];
    header.extend(table.feature_names.iter().map(|s| s.as_str()));
    writer.write_record(&header).map_err(csv_err)?;
    for row in &table.rows {
        let mut record = vec![
            row.patient_id.clone(),
            row.treatment.clone(),
            row.block_start.to_string(),
            row.block_end.to_string(),
            crate::ingest::format_float(row.target.value()),
        ];
        record.extend(row.covariates.iter().map(|v| crate::ingest::format_float(*v)));
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| FeatureError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Reads a master table written by [`master_table_to_csv`]. The
/// degenerate-block count is not stored in the CSV and reads back as
/// zero.
pub fn master_table_from_csv(path: &Path) -> Result<MasterTable, FeatureError> {
    let csv_err = |e| FeatureError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let fixed: Vec<&str> = headers.iter().take(5).collect();
    if fixed != RESERVED_COLUMNS {
        return Err(FeatureError::Row {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected leading columns {RESERVED_COLUMNS:?}, found {fixed:?}"),
        });
    }
    let feature_names: Vec<String> = headers.iter().skip(5).map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |msg: String| FeatureError::Row {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let parse_date = |raw: &str| {
            NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                .map_err(|e| row_err(format!("bad date {raw:?}: {e}")))
        };
        let target_raw: f64 = record[4]
            .parse()
            .map_err(|_| row_err(format!("bad target {:?}", &record[4])))?;
        let target = TargetValue::new(target_raw)
            .map_err(|e| row_err(e.to_string()))?;
        let mut covariates = Vec::with_capacity(feature_names.len());
        for (i, raw) in record.iter().skip(5).enumerate() {
            let value: f64 = raw.parse().map_err(|_| {
                row_err(format!("bad value {:?} for column {:?}", raw, feature_names[i]))
            })?;
            covariates.push(value);
        }
        rows.push(MasterRow {
            patient_id: record[0].to_string(),
            treatment: record[1].to_string(),
            block_start: parse_date(&record[2])?,
            block_end: parse_date(&record[3])?,
            covariates,
            target,
        });
    }
    Ok(MasterTable {
        feature_names,
        rows,
        degenerate_blocks: 0,
    })
}
