//! Outcome modelling for treatments that are absent from training data.
//!
//! `txcast` turns longitudinal patient event streams into treatment blocks,
//! builds covariates and a steroid-burden endpoint per block, encodes
//! treatments as vectors (one-hot, structure-hash, knowledge-graph bags),
//! and measures — via bootstrapped leave-one-treatment-out evaluation —
//! when a treatment-aware outcome model beats a treatment-blind baseline.
//! A meta-analysis layer links embedding-space novelty of the held-out
//! treatment to the odds of beating that baseline.
//!
//! The crate is organised as a pipeline; each stage is usable on its own:
//!
//! * [`ingest`] — parse and validate event / catalog / demographics files
//! * [`cohort`] — chain prescriptions into treatment blocks, compute targets
//! * [`features`] — lookback covariates at the block index date
//! * [`kegg`] — KEGG DRUG flat-file client, parser and token expansion
//! * [`embeddings`] — one-hot, SMILES n-gram hashing, bag-of-tokens, TF-IDF,
//!   PCA and novelty distances
//! * [`learners`] — random-forest regressor, feature selection, logistic
//!   regression with Wald inference, MSE
//! * [`evaluation`] — the bootstrapped leave-one-treatment-out grid
//! * [`meta`] — novelty-versus-win logistic regressions
//! * [`synthgen`] — synthetic datasets with known ground truth
//! * [`dataset`] — on-disk layout shared by the CLI and tests
//!
//! The `book/` directory of the repository walks through the concepts in
//! the same order; its code snippets are compiled as doc-tests below.

pub mod cohort;
pub mod dataset;
pub mod embeddings;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod kegg;
pub mod learners;
pub mod meta;
pub mod seed;
pub mod synthgen;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/learners.md")]
    mod learners {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/meta-analysis.md")]
    mod meta_analysis {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
}
