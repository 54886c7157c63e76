//! Reading and validating the raw inputs: patient event streams, the
//! treatment catalog, and patient demographics.
//!
//! All three are plain CSV with fixed headers. Parsers reject malformed
//! rows with the file path and 1-based line number, so a bad export fails
//! loudly instead of silently skewing downstream cohorts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const EVENT_HEADER: [&str; 6] = [
    "patient_id",
    "date",
    "kind",
    "code",
    "days_supply",
    "quantity",
];
const CATALOG_HEADER: [&str; 4] = ["generic_name", "medication_class", "kegg_code", "smiles"];
const DEMOGRAPHICS_HEADER: [&str; 3] = ["patient_id", "birth_date", "gender"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: csv error: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    Header {
        path: PathBuf,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{path}:{line}: {msg}")]
    Row {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("{path}: duplicate treatment {name:?}")]
    DuplicateTreatment { path: PathBuf, name: String },
    #[error("{path}: duplicate patient {patient_id:?}")]
    DuplicatePatient { path: PathBuf, patient_id: String },
}

/// What a clinical event row records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Diagnosis,
    Prescription,
    Procedure,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "diagnosis",
            EventKind::Prescription => "prescription",
            EventKind::Procedure => "procedure",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diagnosis" => Ok(EventKind::Diagnosis),
            "prescription" => Ok(EventKind::Prescription),
            "procedure" => Ok(EventKind::Procedure),
            other => Err(format!(
                "unknown event kind {other:?} (expected diagnosis, prescription or procedure)"
            )),
        }
    }
}

/// One row of a patient's longitudinal record.
///
/// `days_supply` is nonzero only for prescriptions; codes are kept verbatim
/// (any coding system is accepted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    pub kind: EventKind,
    pub code: String,
    pub days_supply: u32,
    pub quantity: f64,
}

/// One treatment of interest: its class plus the optional identifiers the
/// embedding stages need. Large-molecule drugs typically have no SMILES.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentCatalogEntry {
    pub generic_name: String,
    pub medication_class: String,
    pub kegg_code: Option<String>,
    pub smiles: Option<String>,
}

/// Recorded gender, encoded for modelling as F=1, M=0, unknown=0.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

impl Gender {
    pub fn encoded(self) -> f64 {
        match self {
            Gender::Female => 1.0,
            Gender::Male => 0.0,
            Gender::Unknown => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "F",
            Gender::Male => "M",
            Gender::Unknown => "U",
        }
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F" => Ok(Gender::Female),
            "M" => Ok(Gender::Male),
            "U" | "" => Ok(Gender::Unknown),
            other => Err(format!("unknown gender {other:?} (expected F, M or U)")),
        }
    }
}

/// Static per-patient attributes used for the age and gender covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub birth_date: NaiveDate,
    pub gender: Gender,
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> IngestError {
    IngestError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn row_err(path: &Path, line: u64, msg: impl Into<String>) -> IngestError {
    IngestError::Row {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn open_reader(path: &Path, expected_header: &[&str]) -> Result<csv::Reader<std::fs::File>, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_err(path, e))?;
    if headers.iter().ne(expected_header.iter().copied()) {
        return Err(IngestError::Header {
            path: path.to_path_buf(),
            expected: expected_header.iter().map(|s| s.to_string()).collect(),
            found: headers.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(reader)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Parses an event file and returns its rows sorted by patient, then date.
///
/// Ties within a patient-date pair keep file order, so downstream grouping
/// is reproducible. Rejected rows: unparsable dates, unknown kinds,
/// negative or non-finite quantities, and `days_supply > 0` on
/// non-prescription rows.
pub fn parse_events(path: &Path) -> Result<Vec<EventRecord>, IngestError> {
    let mut reader = open_reader(path, &EVENT_HEADER)?;
    let mut events = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| csv_err(path, e))?;
        let line = record_line(&record);
        let patient_id = record[0].to_string();
        if patient_id.is_empty() {
            return Err(row_err(path, line, "empty patient_id"));
        }
        let date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d")
            .map_err(|e| row_err(path, line, format!("bad date {:?}: {e}", &record[1])))?;
        let kind: EventKind = record[2]
            .parse()
            .map_err(|msg| row_err(path, line, msg))?;
        let code = record[3].to_string();
        if code.is_empty() {
            return Err(row_err(path, line, "empty code"));
        }
        let days_supply: u32 = record[4].parse().map_err(|_| {
            row_err(
                path,
                line,
                format!("bad days_supply {:?} (expected a nonnegative integer)", &record[4]),
            )
        })?;
        if days_supply > 0 && kind != EventKind::Prescription {
            return Err(row_err(
                path,
                line,
                format!("days_supply={days_supply} on a {kind} row (only prescriptions carry supply)"),
            ));
        }
        let quantity: f64 = record[5]
            .parse()
            .map_err(|_| row_err(path, line, format!("bad quantity {:?}", &record[5])))?;
        if !quantity.is_finite() || quantity < 0.0 {
            return Err(row_err(
                path,
                line,
                format!("quantity {quantity} must be finite and nonnegative"),
            ));
        }
        events.push(EventRecord {
            patient_id,
            date,
            kind,
            code,
            days_supply,
            quantity,
        });
    }
    events.sort_by(|a, b| (&a.patient_id, a.date).cmp(&(&b.patient_id, b.date)));
    Ok(events)
}

/// Writes events in the same format `parse_events` reads.
pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(EVENT_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for event in events {
        writer
            .write_record([
                event.patient_id.as_str(),
                &event.date.format("%Y-%m-%d").to_string(),
                event.kind.as_str(),
                event.code.as_str(),
                &event.days_supply.to_string(),
                &format_float(event.quantity),
            ])
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Shortest decimal form that round-trips through `f64` parsing.
pub fn format_float(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains(['.', 'e', 'E']) && v.is_finite() {
        s.push_str(".0");
    }
    s
}

fn optional_cell(raw: &str) -> Option<String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("nan") || trimmed == "NA" {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// True when `code` looks like a KEGG DRUG accession: `D` plus five digits.
pub fn is_kegg_drug_code(code: &str) -> bool {
    code.len() == 6
        && code.starts_with('D')
        && code[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Parses the treatment catalog. Empty, `NA` and `NaN` cells mean the
/// identifier is not available for that treatment.
pub fn parse_treatment_catalog(path: &Path) -> Result<Vec<TreatmentCatalogEntry>, IngestError> {
    let mut reader = open_reader(path, &CATALOG_HEADER)?;
    let mut entries: Vec<TreatmentCatalogEntry> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for result in reader.records() {
        let record = result.map_err(|e| csv_err(path, e))?;
        let line = record_line(&record);
        let generic_name = record[0].trim().to_string();
        if generic_name.is_empty() {
            return Err(row_err(path, line, "empty generic_name"));
        }
        if !seen.insert(generic_name.clone()) {
            return Err(IngestError::DuplicateTreatment {
                path: path.to_path_buf(),
                name: generic_name,
            });
        }
        let medication_class = record[1].trim().to_string();
        let kegg_code = optional_cell(&record[2]);
        if let Some(code) = &kegg_code {
            if !is_kegg_drug_code(code) {
                return Err(row_err(
                    path,
                    line,
                    format!("kegg_code {code:?} does not match D plus five digits"),
                ));
            }
        }
        let smiles = optional_cell(&record[3]);
        entries.push(TreatmentCatalogEntry {
            generic_name,
            medication_class,
            kegg_code,
            smiles,
        });
    }
    Ok(entries)
}

/// Writes a catalog in the same format `parse_treatment_catalog` reads.
pub fn write_treatment_catalog(
    path: &Path,
    entries: &[TreatmentCatalogEntry],
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(CATALOG_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for entry in entries {
        writer
            .write_record([
                entry.generic_name.as_str(),
                entry.medication_class.as_str(),
                entry.kegg_code.as_deref().unwrap_or(""),
                entry.smiles.as_deref().unwrap_or(""),
            ])
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Parses demographics keyed by patient id. Duplicate patients are an
/// error; an empty gender cell means unknown.
pub fn parse_demographics(path: &Path) -> Result<BTreeMap<String, Demographics>, IngestError> {
    let mut reader = open_reader(path, &DEMOGRAPHICS_HEADER)?;
    let mut out = BTreeMap::new();
    for result in reader.records() {
        let record = result.map_err(|e| csv_err(path, e))?;
        let line = record_line(&record);
        let patient_id = record[0].to_string();
        if patient_id.is_empty() {
            return Err(row_err(path, line, "empty patient_id"));
        }
        let birth_date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d")
            .map_err(|e| row_err(path, line, format!("bad birth_date {:?}: {e}", &record[1])))?;
        let gender: Gender = record[2]
            .parse()
            .map_err(|msg| row_err(path, line, msg))?;
        if out
            .insert(patient_id.clone(), Demographics { birth_date, gender })
            .is_some()
        {
            return Err(IngestError::DuplicatePatient {
                path: path.to_path_buf(),
                patient_id,
            });
        }
    }
    Ok(out)
}

/// Writes demographics in the same format `parse_demographics` reads.
pub fn write_demographics(
    path: &Path,
    demographics: &BTreeMap<String, Demographics>,
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(DEMOGRAPHICS_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for (patient_id, demo) in demographics {
        writer
            .write_record([
                patient_id.as_str(),
                &demo.birth_date.format("%Y-%m-%d").to_string(),
                demo.gender.as_str(),
            ])
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Summary counts produced by [`validate_events`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub total: usize,
    pub patients: usize,
    pub kind_counts: BTreeMap<String, usize>,
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
    pub prescriptions_without_supply: usize,
    pub zero_quantity_rows: usize,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "events: {}", self.total)?;
        writeln!(f, "patients: {}", self.patients)?;
        for (kind, count) in &self.kind_counts {
            writeln!(f, "  {kind}: {count}")?;
        }
        match (self.first_date, self.last_date) {
            (Some(first), Some(last)) => writeln!(f, "date range: {first} to {last}")?,
            _ => writeln!(f, "date range: empty")?,
        }
        writeln!(
            f,
            "prescriptions without supply: {}",
            self.prescriptions_without_supply
        )?;
        write!(f, "zero-quantity rows: {}", self.zero_quantity_rows)
    }
}

/// Tallies an already parsed event stream: counts per kind, covered date
/// range, and soft-check violations that do not fail parsing (a
/// prescription with zero supply, rows with zero quantity).
pub fn validate_events(events: &[EventRecord]) -> ValidationReport {
    let mut kind_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut patients: BTreeSet<&str> = BTreeSet::new();
    let mut first_date = None;
    let mut last_date = None;
    let mut prescriptions_without_supply = 0;
    let mut zero_quantity_rows = 0;
    for event in events {
        *kind_counts.entry(event.kind.to_string()).or_default() += 1;
        patients.insert(&event.patient_id);
        if first_date.is_none_or(|d| event.date < d) {
            first_date = Some(event.date);
        }
        if last_date.is_none_or(|d| event.date > d) {
            last_date = Some(event.date);
        }
        if event.kind == EventKind::Prescription && event.days_supply == 0 {
            prescriptions_without_supply += 1;
        }
        if event.quantity == 0.0 {
            zero_quantity_rows += 1;
        }
    }
    ValidationReport {
        total: events.len(),
        patients: patients.len(),
        kind_counts,
        first_date,
        last_date,
        prescriptions_without_supply,
        zero_quantity_rows,
    }
}
