//! Knowledge-graph treatment embeddings from KEGG DRUG entries.
//!
//! For each drug the pipeline gathers a token multiset: its linked disease
//! codes, every drug co-linked through those diseases (with multiplicity
//! when reachable through several), target and pathway identifiers,
//! efficacy snippets and class codes. Token bags become a count matrix over
//! the sorted token union, are TFIDF-weighted and reduced by PCA.

pub mod client;
pub mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use thiserror::Error;

use crate::embeddings::{
    bag_count_matrix, pca_fit_transform, tfidf_transform, EmbedError, Method, PcaModel,
    TreatmentEmbedding, Vocabulary,
};
use crate::ingest::TreatmentCatalogEntry;
pub use client::KeggClient;
pub use parse::{parse_disease_entry, parse_drug_entry, DiseaseRecord, KeggRecord, ParseError};

#[derive(Debug, Error)]
pub enum KeggError {
    #[error("bad kegg code {0:?}")]
    BadCode(String),
    #[error("entry {code} is not cached and network access is disabled")]
    OfflineMiss { code: String },
    #[error("fetching {code}: http status {status}")]
    HttpStatus { code: String, status: u16 },
    #[error("fetching {code}: {source}")]
    Network {
        code: String,
        source: Box<ureq::Error>,
    },
    #[error("entry {code}: empty response body")]
    EmptyBody { code: String },
    #[error("entry {code}: {source}")]
    Parse { code: String, source: ParseError },
    #[error("duplicate treatment {0:?}")]
    DuplicateTreatment(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Token multiset for one drug.
pub type TokenBag = BTreeMap<String, usize>;

/// Disease code to linked drug codes. Drug lists are deduplicated per
/// disease, so multiplicity only accumulates across diseases.
#[derive(Debug, Default, Clone)]
pub struct DiseaseIndex {
    drugs_by_disease: BTreeMap<String, Vec<String>>,
}

impl DiseaseIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: &DiseaseRecord) {
        let mut drugs = record.drugs.clone();
        drugs.sort_unstable();
        drugs.dedup();
        self.drugs_by_disease.insert(record.code.clone(), drugs);
    }

    pub fn linked_drugs(&self, disease: &str) -> Option<&[String]> {
        self.drugs_by_disease.get(disease).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.drugs_by_disease.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drugs_by_disease.is_empty()
    }
}

fn add(bag: &mut TokenBag, token: &str) {
    *bag.entry(token.to_string()).or_insert(0) += 1;
}

/// Builds one drug's token multiset: disease codes, drugs co-linked through
/// those diseases (counted once per linking disease), targets and pathways,
/// efficacy snippets, class identifiers. A disease absent from the index
/// contributes only its own code.
pub fn expand_linked_drugs(record: &KeggRecord, index: &DiseaseIndex) -> TokenBag {
    let mut bag = TokenBag::new();
    for disease in &record.diseases {
        add(&mut bag, disease);
        match index.linked_drugs(disease) {
            Some(drugs) => {
                for drug in drugs {
                    add(&mut bag, drug);
                }
            }
            None => log::warn!(
                "disease {disease} linked from {} is not in the index; it contributes only itself",
                record.code
            ),
        }
    }
    for token in &record.targets_pathways {
        add(&mut bag, token);
    }
    for token in &record.efficacy {
        add(&mut bag, token);
    }
    for token in &record.drug_class {
        add(&mut bag, token);
    }
    bag
}

/// Fetches and expands every drug code into its token bag. Drug fetch or
/// parse failures abort; a disease that cannot be fetched is skipped with a
/// warning and contributes only its own code.
pub fn collect_drug_tokens(
    client: &KeggClient,
    codes: &[String],
) -> Result<BTreeMap<String, TokenBag>, KeggError> {
    let unique: BTreeSet<&String> = codes.iter().collect();
    let mut records = Vec::with_capacity(unique.len());
    for code in unique {
        let raw = client.fetch_entry(code)?;
        let record = parse_drug_entry(&raw).map_err(|source| KeggError::Parse {
            code: code.clone(),
            source,
        })?;
        records.push(record);
    }

    let diseases: BTreeSet<&String> = records.iter().flat_map(|r| &r.diseases).collect();
    let mut index = DiseaseIndex::new();
    for disease in diseases {
        match client.fetch_entry(disease) {
            Ok(raw) => {
                let record =
                    parse_disease_entry(&raw).map_err(|source| KeggError::Parse {
                        code: disease.clone(),
                        source,
                    })?;
                index.insert(&record);
            }
            Err(err @ KeggError::Io { .. }) => return Err(err),
            Err(err) => log::warn!("skipping disease {disease}: {err}"),
        }
    }

    Ok(records
        .iter()
        .map(|record| (record.code.clone(), expand_linked_drugs(record, &index)))
        .collect())
}

/// Turns named token bags into a treatment embedding: count matrix over the
/// sorted token union, TFIDF weighting, PCA to `k` components.
pub fn build_kegg_embedding(
    named_bags: &[(String, TokenBag)],
    k: usize,
) -> Result<(TreatmentEmbedding, PcaModel, Vocabulary), KeggError> {
    let vocabulary = Vocabulary::sorted_union(named_bags.iter().map(|(_, bag)| bag));
    let bags: Vec<TokenBag> = named_bags.iter().map(|(_, bag)| bag.clone()).collect();
    let counts = bag_count_matrix(&bags, &vocabulary);
    let weighted = tfidf_transform(&counts)?;
    let (scores, pca) = pca_fit_transform(&weighted, k)?;
    let mut vectors = BTreeMap::new();
    for ((name, _), score) in named_bags.iter().zip(scores) {
        if vectors.insert(name.clone(), score).is_some() {
            return Err(KeggError::DuplicateTreatment(name.clone()));
        }
    }
    let embedding = TreatmentEmbedding::new(Method::Kegg, k, vectors)?;
    Ok((embedding, pca, vocabulary))
}

/// Full pipeline from a treatment catalog: fetch, expand, embed. Catalog
/// entries without a KEGG code are left out (they fall back to zero vectors
/// downstream, like any treatment missing from an embedding).
pub fn catalog_kegg_embedding(
    client: &KeggClient,
    catalog: &[TreatmentCatalogEntry],
    k: usize,
) -> Result<(TreatmentEmbedding, PcaModel, Vocabulary), KeggError> {
    let coded: Vec<(&str, &str)> = catalog
        .iter()
        .filter_map(|e| e.kegg_code.as_deref().map(|c| (e.generic_name.as_str(), c)))
        .collect();
    let codes: Vec<String> = coded.iter().map(|(_, c)| c.to_string()).collect();
    let bags = collect_drug_tokens(client, &codes)?;
    let named: Vec<(String, TokenBag)> = coded
        .iter()
        .map(|(name, code)| {
            let bag = bags
                .get(*code)
                .expect("collect_drug_tokens covers every requested code")
                .clone();
            (name.to_string(), bag)
        })
        .collect();
    build_kegg_embedding(&named, k)
}
