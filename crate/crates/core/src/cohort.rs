//! Treatment blocks and the steroid-burden target.
//!
//! A block is a maximal chain of prescriptions of one treatment for one
//! patient, where consecutive prescriptions are bridged when the gap
//! between the previous prescription's coverage end and the next fill is
//! within the washout. The target for a block is the fraction of days in
//! the post-onset window that are covered by steroid supply; the onset
//! window at the start of the block is excluded so induction-phase
//! steroids do not count against the treatment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, FeatureSpec, MasterRow, MasterTable};
use crate::ingest::{Demographics, EventKind, EventRecord};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("events must be sorted by patient_id then date (violated at row {index})")]
    NotSorted { index: usize },
    #[error("washout_days must be positive, got {0}")]
    BadWashout(i64),
    #[error("onset_days must be nonnegative, got {0}")]
    BadOnset(i64),
    #[error("target value {0} outside [0, 1]")]
    TargetOutOfRange(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("failed to write {path}: {source}")]
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
    #[error("{path}:{line}: {msg}")]
    Row {
        path: PathBuf,
        line: u64,
        msg: String,
    },
}

/// Share of post-onset days covered by steroids; always within `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct TargetValue(f64);

impl TargetValue {
    pub fn new(value: f64) -> Result<Self, CohortError> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(TargetValue(value))
        } else {
            Err(CohortError::TargetOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for TargetValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(deserializer)?;
        TargetValue::new(raw).map_err(serde::de::Error::custom)
    }
}

/// One continuous course of one treatment for one patient.
///
/// `start <= onset_end <= end` always holds; for blocks shorter than the
/// onset window, `onset_end` is clamped to `end` and the block yields no
/// target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentBlock {
    pub patient_id: String,
    pub treatment: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub onset_end: NaiveDate,
}

fn day(date: NaiveDate) -> i64 {
    date.num_days_from_ce() as i64
}

fn add_days(date: NaiveDate, days: i64) -> NaiveDate {
    date + chrono::Duration::days(days)
}

/// Chains prescriptions into treatment blocks.
///
/// `treatment_codes` maps prescription codes to generic treatment names;
/// several codes may map to one treatment and then share a chain. Events
/// must already be sorted by patient then date (as `parse_events`
/// returns them). A new block starts when the gap from the previous
/// prescription's coverage end (`date + days_supply`) to the next fill
/// date exceeds `washout_days`. A block ends at the last chained
/// prescription's coverage end, and `onset_end` is `start + onset_days`
/// clamped to the block end.
///
/// Returned blocks are sorted by patient, treatment, then start date, and
/// blocks of the same patient and treatment never overlap.
pub fn build_treatment_blocks(
    events: &[EventRecord],
    treatment_codes: &BTreeMap<String, String>,
    washout_days: i64,
    onset_days: i64,
) -> Result<Vec<TreatmentBlock>, CohortError> {
    if washout_days <= 0 {
        return Err(CohortError::BadWashout(washout_days));
    }
    if onset_days < 0 {
        return Err(CohortError::BadOnset(onset_days));
    }
    for (index, pair) in events.windows(2).enumerate() {
        if (&pair[0].patient_id, pair[0].date) > (&pair[1].patient_id, pair[1].date) {
            return Err(CohortError::NotSorted { index: index + 1 });
        }
    }

    let mut fills: BTreeMap<(&str, &str), Vec<(NaiveDate, u32)>> = BTreeMap::new();
    for event in events {
        if event.kind != EventKind::Prescription {
            continue;
        }
        if let Some(treatment) = treatment_codes.get(&event.code) {
            fills
                .entry((event.patient_id.as_str(), treatment.as_str()))
                .or_default()
                .push((event.date, event.days_supply));
        }
    }

    let mut blocks = Vec::new();
    for ((patient_id, treatment), chain) in fills {
        let mut start = chain[0].0;
        let mut cover_end = day(chain[0].0) + i64::from(chain[0].1);
        let push_block = |start: NaiveDate, cover_end: i64, blocks: &mut Vec<TreatmentBlock>| {
            let end = add_days(start, (cover_end - day(start)).max(0));
            let onset_end = add_days(start, onset_days).min(end);
            blocks.push(TreatmentBlock {
                patient_id: patient_id.to_string(),
                treatment: treatment.to_string(),
                start,
                end,
                onset_end,
            });
        };
        for &(date, supply) in &chain[1..] {
            let gap = day(date) - cover_end;
            if gap > washout_days {
                push_block(start, cover_end, &mut blocks);
                start = date;
            }
            cover_end = day(date) + i64::from(supply);
        }
        push_block(start, cover_end, &mut blocks);
    }
    Ok(blocks)
}

/// Fraction of the block's post-onset window covered by steroid supply,
/// or `None` when the block is no longer than its onset window (a
/// degenerate block with an empty evaluation window).
///
/// Each steroid prescription covers `[date, date + days_supply)`;
/// coverage is a set union, so overlapping prescriptions never count a
/// day twice, and supply running past the block end is truncated there.
/// Rows of other patients or non-prescription rows are ignored, which
/// lets callers pass a coarsely filtered slice.
pub fn compute_target(
    block: &TreatmentBlock,
    steroid_events: &[EventRecord],
) -> Result<Option<TargetValue>, CohortError> {
    let window_start = day(block.onset_end) + 1;
    let window_end = day(block.end);
    let denominator = window_end - window_start + 1;
    if denominator <= 0 {
        return Ok(None);
    }

    let mut intervals: Vec<(i64, i64)> = Vec::new();
    for event in steroid_events {
        if event.kind != EventKind::Prescription
            || event.patient_id != block.patient_id
            || event.days_supply == 0
        {
            continue;
        }
        let lo = day(event.date).max(window_start);
        let hi = (day(event.date) + i64::from(event.days_supply) - 1).min(window_end);
        if lo <= hi {
            intervals.push((lo, hi));
        }
    }
    intervals.sort_unstable();

    let mut covered = 0i64;
    let mut current: Option<(i64, i64)> = None;
    for (lo, hi) in intervals {
        match current {
            Some((clo, chi)) if lo <= chi + 1 => current = Some((clo, chi.max(hi))),
            Some((clo, chi)) => {
                covered += chi - clo + 1;
                current = Some((lo, hi));
            }
            None => current = Some((lo, hi)),
        }
    }
    if let Some((clo, chi)) = current {
        covered += chi - clo + 1;
    }

    let value = (covered as f64 / denominator as f64).clamp(0.0, 1.0);
    Ok(Some(TargetValue::new(value)?))
}

/// Joins blocks with covariates and targets into the modelling table.
///
/// Covariates are assembled as of each block's start date from the
/// patient's event history and demographics. Blocks with an empty
/// evaluation window are dropped and counted in `degenerate_blocks`.
pub fn build_master_table(
    blocks: &[TreatmentBlock],
    events: &[EventRecord],
    specs: &[FeatureSpec],
    demographics: &BTreeMap<String, Demographics>,
    steroid_codes: &BTreeSet<String>,
) -> Result<MasterTable, CohortError> {
    let mut ranges: HashMap<&str, std::ops::Range<usize>> = HashMap::new();
    let mut i = 0;
    while i < events.len() {
        let pid = events[i].patient_id.as_str();
        let begin = i;
        while i < events.len() && events[i].patient_id == pid {
            i += 1;
        }
        ranges.insert(pid, begin..i);
    }

    let feature_names = features::covariate_names(specs);
    let mut rows = Vec::new();
    let mut degenerate_blocks = 0;
    for block in blocks {
        let patient_events = ranges
            .get(block.patient_id.as_str())
            .map(|r| &events[r.clone()])
            .unwrap_or(&[]);
        let steroid_events: Vec<EventRecord> = patient_events
            .iter()
            .filter(|e| e.kind == EventKind::Prescription && steroid_codes.contains(&e.code))
            .cloned()
            .collect();
        let target = match compute_target(block, &steroid_events)? {
            Some(target) => target,
            None => {
                degenerate_blocks += 1;
                continue;
            }
        };
        let covariates =
            features::assemble_covariates(block, patient_events, specs, demographics)?;
        rows.push(MasterRow {
            patient_id: block.patient_id.clone(),
            treatment: block.treatment.clone(),
            block_start: block.start,
            block_end: block.end,
            covariates,
            target,
        });
    }
    Ok(MasterTable {
        feature_names,
        rows,
        degenerate_blocks,
    })
}

const BLOCK_HEADER: [&str; 5] = ["patient_id", "treatment", "start", "end", "onset_end"];

/// Writes blocks as CSV with columns patient_id, treatment, start, end,
/// onset_end (dates in ISO form).
pub fn blocks_to_csv(path: &Path, blocks: &[TreatmentBlock]) -> Result<(), CohortError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CohortError::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    writer
        .write_record(BLOCK_HEADER)
        .map_err(|e| CohortError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    for block in blocks {
        writer
            .write_record([
                block.patient_id.as_str(),
                block.treatment.as_str(),
                &block.start.to_string(),
                &block.end.to_string(),
                &block.onset_end.to_string(),
            ])
            .map_err(|e| CohortError::Csv {
                path: path.to_path_buf(),
                source: e,
            })?;
    }
    writer.flush().map_err(|e| CohortError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Reads blocks written by [`blocks_to_csv`].
pub fn blocks_from_csv(path: &Path) -> Result<Vec<TreatmentBlock>, CohortError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CohortError::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let headers = reader.headers().map_err(|e| CohortError::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    if headers.iter().ne(BLOCK_HEADER.iter().copied()) {
        return Err(CohortError::Row {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {BLOCK_HEADER:?}, found {headers:?}"),
        });
    }
    let mut blocks = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| CohortError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_date = |raw: &str| {
            NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|e| CohortError::Row {
                path: path.to_path_buf(),
                line,
                msg: format!("bad date {raw:?}: {e}"),
            })
        };
        blocks.push(TreatmentBlock {
            patient_id: record[0].to_string(),
            treatment: record[1].to_string(),
            start: parse_date(&record[2])?,
            end: parse_date(&record[3])?,
            onset_end: parse_date(&record[4])?,
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(ymd: (i32, u32, u32)) -> NaiveDate {
        NaiveDate::from_ymd_opt(ymd.0, ymd.1, ymd.2).unwrap()
    }

    fn rx(pid: &str, d: NaiveDate, code: &str, supply: u32) -> EventRecord {
        EventRecord {
            patient_id: pid.into(),
            date: d,
            kind: EventKind::Prescription,
            code: code.into(),
            days_supply: supply,
            quantity: f64::from(supply),
        }
    }

    fn codes() -> BTreeMap<String, String> {
        BTreeMap::from([("mesa".to_string(), "mesalazine".to_string())])
    }

    #[test]
    fn gap_within_washout_merges() {
        let d0 = date((2020, 1, 1));
        let events = vec![
            rx("p1", d0, "mesa", 30),
            rx("p1", add_days(d0, 45), "mesa", 30),
        ];
        let blocks = build_treatment_blocks(&events, &codes(), 30, 28).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].start, d0);
        assert_eq!(blocks[0].end, add_days(d0, 75));
        assert_eq!(blocks[0].onset_end, add_days(d0, 28));
    }

    #[test]
    fn gap_beyond_washout_splits() {
        let d0 = date((2020, 1, 1));
        let events = vec![
            rx("p1", d0, "mesa", 30),
            rx("p1", add_days(d0, 61), "mesa", 30),
        ];
        let blocks = build_treatment_blocks(&events, &codes(), 30, 28).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].end, add_days(d0, 30));
        assert_eq!(blocks[1].start, add_days(d0, 61));
    }

    #[test]
    fn gap_measured_from_previous_event_not_running_max() {
        // First fill covers 100 days, second overlaps it with a short
        // supply; the third fill's gap is measured from the second fill's
        // coverage end, so it starts a new block even though the first
        // fill's supply would have bridged it.
        let d0 = date((2020, 1, 1));
        let events = vec![
            rx("p1", d0, "mesa", 100),
            rx("p1", add_days(d0, 10), "mesa", 5),
            rx("p1", add_days(d0, 50), "mesa", 10),
        ];
        let blocks = build_treatment_blocks(&events, &codes(), 30, 28).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].end, add_days(d0, 15));
        assert_eq!(blocks[1].start, add_days(d0, 50));
        assert_eq!(blocks[1].end, add_days(d0, 60));
    }

    #[test]
    fn short_block_clamps_onset() {
        let d0 = date((2020, 1, 1));
        let events = vec![rx("p1", d0, "mesa", 10)];
        let blocks = build_treatment_blocks(&events, &codes(), 30, 28).unwrap();
        assert_eq!(blocks[0].onset_end, blocks[0].end);
        assert_eq!(compute_target(&blocks[0], &[]).unwrap(), None);
    }

    #[test]
    fn unsorted_events_rejected() {
        let d0 = date((2020, 1, 1));
        let events = vec![rx("p1", add_days(d0, 5), "mesa", 10), rx("p1", d0, "mesa", 10)];
        assert!(matches!(
            build_treatment_blocks(&events, &codes(), 30, 28),
            Err(CohortError::NotSorted { index: 1 })
        ));
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(matches!(
            build_treatment_blocks(&[], &codes(), 0, 28),
            Err(CohortError::BadWashout(0))
        ));
        assert!(matches!(
            build_treatment_blocks(&[], &codes(), 30, -1),
            Err(CohortError::BadOnset(-1))
        ));
    }

    #[test]
    fn target_counts_overlap_once_and_truncates() {
        let d0 = date((2020, 1, 1));
        let block = TreatmentBlock {
            patient_id: "p1".into(),
            treatment: "mesalazine".into(),
            start: d0,
            end: add_days(d0, 128),
            onset_end: add_days(d0, 28),
        };
        // Window is days 29..=128 (100 days). Two overlapping fills cover
        // days 40..=59 once; the third runs past the end and is truncated,
        // covering days 120..=128.
        let steroids = vec![
            rx("p1", add_days(d0, 40), "pred", 15),
            rx("p1", add_days(d0, 45), "pred", 15),
            rx("p1", add_days(d0, 120), "pred", 30),
        ];
        let target = compute_target(&block, &steroids).unwrap().unwrap();
        assert_eq!(target.value(), 29.0 / 100.0);
    }

    #[test]
    fn target_excludes_onset_supply() {
        let d0 = date((2020, 1, 1));
        let block = TreatmentBlock {
            patient_id: "p1".into(),
            treatment: "mesalazine".into(),
            start: d0,
            end: add_days(d0, 128),
            onset_end: add_days(d0, 28),
        };
        // Fill covering days 20..=29: only day 29 falls past the onset
        // window (days 29..=128).
        let steroids = vec![rx("p1", add_days(d0, 20), "pred", 10)];
        let target = compute_target(&block, &steroids).unwrap().unwrap();
        assert_eq!(target.value(), 1.0 / 100.0);
    }

    #[test]
    fn target_ignores_other_patients() {
        let d0 = date((2020, 1, 1));
        let block = TreatmentBlock {
            patient_id: "p1".into(),
            treatment: "mesalazine".into(),
            start: d0,
            end: add_days(d0, 60),
            onset_end: add_days(d0, 28),
        };
        let steroids = vec![rx("p2", add_days(d0, 40), "pred", 10)];
        let target = compute_target(&block, &steroids).unwrap().unwrap();
        assert_eq!(target.value(), 0.0);
    }

    #[test]
    fn blocks_csv_roundtrip() {
        let d0 = date((2020, 1, 1));
        let blocks = vec![TreatmentBlock {
            patient_id: "p1".into(),
            treatment: "mesalazine".into(),
            start: d0,
            end: add_days(d0, 60),
            onset_end: add_days(d0, 28),
        }];
        let file = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        blocks_to_csv(file.path(), &blocks).unwrap();
        assert_eq!(blocks_from_csv(file.path()).unwrap(), blocks);
    }
}
