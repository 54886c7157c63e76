//! On-disk dataset layout shared by the CLI, the synthetic generator and
//! the integration tests.
//!
//! A dataset directory holds the three ingest files plus two JSON configs:
//!
//! ```text
//! dataset/
//!   events.csv         patient event stream, sorted by patient then date
//!   demographics.csv   one row per patient
//!   catalog.csv        treatment catalog (names, classes, KEGG codes, SMILES)
//!   features.json      covariate definitions (list of FeatureSpec)
//!   pipeline.json      cohort parameters: onset, washout, code maps
//!   kegg_cache/        optional: KEGG flat files for offline embedding
//! ```
//!
//! [`load_dataset`] reads the whole directory; [`Dataset::build_master_table`]
//! runs block construction and covariate assembly in one step.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{self, CohortError, TreatmentBlock};
use crate::features::{FeatureError, FeatureSpec, MasterTable};
use crate::ingest::{self, Demographics, EventRecord, IngestError, TreatmentCatalogEntry};

pub const EVENTS_FILE: &str = "events.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const CATALOG_FILE: &str = "catalog.csv";
pub const FEATURES_FILE: &str = "features.json";
pub const PIPELINE_FILE: &str = "pipeline.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const KEGG_CACHE_DIR: &str = "kegg_cache";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("bad pipeline config: {0}")]
    BadPipeline(String),
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DatasetError + '_ {
    move |source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Cohort construction parameters: which prescription codes count as
/// treatment fills, which count as steroid use, and the day windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Days after block start during which steroid use is attributed to
    /// the pre-treatment flare rather than to treatment failure.
    pub onset_days: i64,
    /// Maximum uncovered gap (days) that still chains two fills into one
    /// block.
    pub washout_days: i64,
    /// Prescription codes that count as steroid exposure.
    pub steroid_codes: BTreeSet<String>,
    /// Prescription code to generic treatment name.
    pub treatment_codes: BTreeMap<String, String>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.onset_days < 0 {
            return Err(DatasetError::BadPipeline(format!(
                "onset_days must be >= 0, got {}",
                self.onset_days
            )));
        }
        if self.washout_days <= 0 {
            return Err(DatasetError::BadPipeline(format!(
                "washout_days must be > 0, got {}",
                self.washout_days
            )));
        }
        if self.treatment_codes.is_empty() {
            return Err(DatasetError::BadPipeline(
                "treatment_codes is empty".into(),
            ));
        }
        if self.steroid_codes.is_empty() {
            return Err(DatasetError::BadPipeline("steroid_codes is empty".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let config: PipelineConfig = serde_json::from_str(&text).map_err(json_err(path))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))?;
        Ok(())
    }
}

/// A fully loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub events: Vec<EventRecord>,
    pub demographics: BTreeMap<String, Demographics>,
    pub catalog: Vec<TreatmentCatalogEntry>,
    pub feature_specs: Vec<FeatureSpec>,
    pub pipeline: PipelineConfig,
}

impl Dataset {
    /// Directory holding KEGG flat files for offline embedding. May not
    /// exist; callers decide whether that is an error.
    pub fn kegg_cache_dir(&self) -> PathBuf {
        self.dir.join(KEGG_CACHE_DIR)
    }

    pub fn build_blocks(&self) -> Result<Vec<TreatmentBlock>, DatasetError> {
        Ok(cohort::build_treatment_blocks(
            &self.events,
            &self.pipeline.treatment_codes,
            self.pipeline.washout_days,
            self.pipeline.onset_days,
        )?)
    }

    /// Blocks, targets and covariates in one step.
    pub fn build_master_table(&self) -> Result<MasterTable, DatasetError> {
        let blocks = self.build_blocks()?;
        Ok(cohort::build_master_table(
            &blocks,
            &self.events,
            &self.feature_specs,
            &self.demographics,
            &self.pipeline.steroid_codes,
        )?)
    }
}

pub fn load_feature_specs(path: &Path) -> Result<Vec<FeatureSpec>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

pub fn save_feature_specs(path: &Path, specs: &[FeatureSpec]) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(specs).map_err(json_err(path))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Reads the five dataset files from `dir`. Fails fast with the missing
/// path if one is absent.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    for name in [
        EVENTS_FILE,
        DEMOGRAPHICS_FILE,
        CATALOG_FILE,
        FEATURES_FILE,
        PIPELINE_FILE,
    ] {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(DatasetError::MissingFile(path));
        }
    }
    let events = ingest::parse_events(&dir.join(EVENTS_FILE))?;
    let demographics = ingest::parse_demographics(&dir.join(DEMOGRAPHICS_FILE))?;
    let catalog = ingest::parse_treatment_catalog(&dir.join(CATALOG_FILE))?;
    let feature_specs = load_feature_specs(&dir.join(FEATURES_FILE))?;
    let pipeline = PipelineConfig::load(&dir.join(PIPELINE_FILE))?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        events,
        demographics,
        catalog,
        feature_specs,
        pipeline,
    })
}
