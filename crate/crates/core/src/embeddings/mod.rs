//! Treatment-to-vector encodings and the distance features derived from
//! them.
//!
//! Three encodings are supported: one-hot over the training treatments,
//! hashed SMILES n-grams reduced by PCA, and KEGG-derived token bags
//! weighted by TFIDF and reduced by PCA. All encodings are deterministic
//! functions of their inputs, so embeddings written to disk can be
//! reproduced bit for bit.

pub mod pca;
pub mod smiles;
pub mod tfidf;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_float, TreatmentCatalogEntry};
pub use pca::{pca_fit, pca_fit_transform, PcaModel};
pub(crate) use smiles::fnv1a64;
pub use smiles::smiles_ngram_counts;
pub use tfidf::tfidf_transform;

/// Default n-gram length for SMILES hashing.
pub const SMILES_NGRAM: usize = 3;
/// Default hash-bucket count for SMILES hashing.
pub const SMILES_HASH_DIM: usize = 512;
/// Default number of retained principal components.
pub const DEFAULT_PCA_K: usize = 3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding input has no rows")]
    Empty,
    #[error("rows have inconsistent lengths")]
    Ragged,
    #[error("non-finite value in embedding input")]
    NonFinite,
    #[error("pca needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("pca k={k} out of range for {rows}x{cols} input (need 1 <= k <= min(rows-1, cols))")]
    KOutOfRange { k: usize, rows: usize, cols: usize },
    #[error("empty smiles string")]
    EmptySmiles,
    #[error("{0}")]
    BadParams(String),
    #[error("embedding file {path}: {msg}")]
    BadFile { path: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// How a treatment is turned into a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneHot,
    Smiles,
    Kegg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::OneHot => "one_hot",
            Method::Smiles => "smiles",
            Method::Kegg => "kegg",
        }
    }

    pub const ALL: [Method; 3] = [Method::OneHot, Method::Smiles, Method::Kegg];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_hot" => Ok(Method::OneHot),
            "smiles" => Ok(Method::Smiles),
            "kegg" => Ok(Method::Kegg),
            other => Err(format!(
                "unknown embedding method {other:?} (expected one_hot, smiles or kegg)"
            )),
        }
    }
}

/// Ordered set of unique tokens. Order is fixed at construction and defines
/// vector component positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the first occurrence of each token, in input order.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for token in tokens {
            let token = token.into();
            if !out.index.contains_key(&token) {
                out.index.insert(token.clone(), out.tokens.len());
                out.tokens.push(token);
            }
        }
        out
    }

    /// Sorted union of all tokens across the given bags.
    pub fn sorted_union<'a, I>(bags: I) -> Self
    where
        I: IntoIterator<Item = &'a BTreeMap<String, usize>>,
    {
        let mut all: Vec<&str> = bags
            .into_iter()
            .flat_map(|bag| bag.keys().map(String::as_str))
            .collect();
        all.sort_unstable();
        all.dedup();
        Vocabulary::new(all.into_iter().map(str::to_string))
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Indicator vector over `vocabulary`. Treatments absent from the
/// vocabulary map to all zeros, which is exactly how a model trained on the
/// vocabulary sees any unseen treatment.
pub fn one_hot_embed(treatment: &str, vocabulary: &Vocabulary) -> Vec<f64> {
    let mut v = vec![0.0; vocabulary.len()];
    if let Some(i) = vocabulary.index_of(treatment) {
        v[i] = 1.0;
    }
    v
}

/// Token-count matrix with one row per bag, columns ordered by `vocab`.
/// Tokens outside the vocabulary are ignored.
pub fn bag_count_matrix(bags: &[BTreeMap<String, usize>], vocab: &Vocabulary) -> Vec<Vec<f64>> {
    bags.iter()
        .map(|bag| {
            let mut row = vec![0.0; vocab.len()];
            for (token, &count) in bag {
                if let Some(i) = vocab.index_of(token) {
                    row[i] = count as f64;
                }
            }
            row
        })
        .collect()
}

/// A complete treatment-to-vector mapping for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentEmbedding {
    method: Method,
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl TreatmentEmbedding {
    /// All vectors must have length `dim`.
    pub fn new(
        method: Method,
        dim: usize,
        vectors: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, EmbedError> {
        if vectors.values().any(|v| v.len() != dim) {
            return Err(EmbedError::Ragged);
        }
        if vectors.values().flatten().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(TreatmentEmbedding {
            method,
            dim,
            vectors,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, treatment: &str) -> Option<&[f64]> {
        self.vectors.get(treatment).map(Vec::as_slice)
    }

    pub fn treatments(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Writes `treatment,method,dim,v0..v{dim-1}` with one row per
    /// treatment, sorted by treatment name.
    pub fn write_csv(&self, path: &Path) -> Result<(), EmbedError> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["treatment".to_string(), "method".to_string(), "dim".to_string()];
        header.extend((0..self.dim).map(|i| format!("v{i}")));
        writer.write_record(&header)?;
        for (treatment, vector) in &self.vectors {
            let mut row = vec![
                treatment.clone(),
                self.method.to_string(),
                self.dim.to_string(),
            ];
            row.extend(vector.iter().map(|v| format_float(*v)));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, EmbedError> {
        let bad = |msg: String| EmbedError::BadFile {
            path: path.display().to_string(),
            msg,
        };
        let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
        let headers = reader.headers()?.clone();
        let fixed = ["treatment", "method", "dim"];
        if headers.len() < 3 || headers.iter().take(3).ne(fixed) {
            return Err(bad(format!(
                "header must start with treatment,method,dim, found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let dim = headers.len() - 3;
        for (i, name) in headers.iter().skip(3).enumerate() {
            if name != format!("v{i}") {
                return Err(bad(format!("expected column v{i}, found {name:?}")));
            }
        }
        let mut method: Option<Method> = None;
        let mut vectors = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let treatment = record[0].to_string();
            let row_method: Method = record[1].parse().map_err(bad)?;
            if *method.get_or_insert(row_method) != row_method {
                return Err(bad("mixed methods in one file".into()));
            }
            let row_dim: usize = record[2]
                .parse()
                .map_err(|_| bad(format!("bad dim {:?}", &record[2])))?;
            if row_dim != dim {
                return Err(bad(format!(
                    "dim column says {row_dim} but header has {dim} value columns"
                )));
            }
            let vector: Vec<f64> = record
                .iter()
                .skip(3)
                .map(|cell| {
                    cell.parse::<f64>()
                        .map_err(|_| bad(format!("bad value {cell:?}")))
                })
                .collect::<Result<_, _>>()?;
            if vectors.insert(treatment.clone(), vector).is_some() {
                return Err(bad(format!("duplicate treatment {treatment:?}")));
            }
        }
        let method = method.ok_or_else(|| bad("no rows".into()))?;
        TreatmentEmbedding::new(method, dim, vectors)
    }
}

/// Distance summaries of one unseen treatment relative to the training
/// treatments and to the centre of gravity of all treatments together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyFeatures {
    pub min_eucl: f64,
    pub min_cosine: f64,
    pub eucl_to_mean: f64,
    pub cosine_to_mean: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `1 - cos(a, b)`, in [0, 2]. A zero-norm operand makes the angle
/// undefined; that case returns 1 (the orthogonality convention) and logs.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine distance against a zero vector, using 1.0");
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

/// Minimum distances from `unseen` to any row of `train`, plus distances to
/// the mean of train rows and `unseen` together.
pub fn novelty_features(
    unseen: &[f64],
    train: &[Vec<f64>],
) -> Result<NoveltyFeatures, EmbedError> {
    if train.is_empty() {
        return Err(EmbedError::Empty);
    }
    if train.iter().any(|v| v.len() != unseen.len()) {
        return Err(EmbedError::Ragged);
    }
    let mut min_eucl = f64::INFINITY;
    let mut min_cosine = f64::INFINITY;
    for row in train {
        min_eucl = min_eucl.min(euclidean(unseen, row));
        min_cosine = min_cosine.min(cosine_distance(unseen, row));
    }
    let count = (train.len() + 1) as f64;
    let mean: Vec<f64> = (0..unseen.len())
        .map(|j| (train.iter().map(|r| r[j]).sum::<f64>() + unseen[j]) / count)
        .collect();
    Ok(NoveltyFeatures {
        min_eucl,
        min_cosine,
        eucl_to_mean: euclidean(unseen, &mean),
        cosine_to_mean: cosine_distance(unseen, &mean),
    })
}

/// Hashed-n-gram SMILES pipeline: featurize every treatment that has a
/// SMILES string, then reduce to `k` components. Treatments without SMILES
/// (typically biologics) are left out of the result.
pub fn build_smiles_embedding(
    catalog: &[TreatmentCatalogEntry],
    k: usize,
) -> Result<(TreatmentEmbedding, PcaModel), EmbedError> {
    let with_smiles: Vec<(&str, &str)> = catalog
        .iter()
        .filter_map(|e| e.smiles.as_deref().map(|s| (e.generic_name.as_str(), s)))
        .collect();
    if with_smiles.is_empty() {
        return Err(EmbedError::Empty);
    }
    let counts: Vec<Vec<f64>> = with_smiles
        .iter()
        .map(|(_, s)| smiles_ngram_counts(s, SMILES_NGRAM, SMILES_HASH_DIM))
        .collect::<Result<_, _>>()?;
    let (scores, model) = pca_fit_transform(&counts, k)?;
    let vectors: BTreeMap<String, Vec<f64>> = with_smiles
        .iter()
        .map(|(name, _)| name.to_string())
        .zip(scores)
        .collect();
    let embedding = TreatmentEmbedding::new(Method::Smiles, k, vectors)?;
    Ok((embedding, model))
}
