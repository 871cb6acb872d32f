//! Two-stage identifiable multi-task representation learning.
//!
//! Stage 1 ([`mtrn`]) trains a multi-task regression network — a shared
//! feature extractor with one linear head per task — by exact maximum
//! likelihood, which identifies the data-generating latents up to an
//! invertible linear map. Stage 2 ([`mtlcm`]) fits a multi-task linear
//! causal model on the frozen features by exact closed-form marginal
//! likelihood, reducing the ambiguity to permutation and per-coordinate
//! scaling; latents are recovered as `A^{-1} h`.
//!
//! The crate also ships the matching synthetic generator ([`datagen`]),
//! the MCC evaluation protocols ([`metrics`]), ingestion for the
//! superconductivity benchmark ([`ingest`]) and a config-driven experiment
//! harness ([`cli`], exposed by the `mtlcm` binary).
//!
//! Every random draw flows through [`numerics::SeededRng`] (xoshiro256++
//! seeded via SplitMix64), so equal configs and seeds reproduce results
//! bit for bit.

pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod mtlcm;
pub mod mtrn;
pub mod numerics;
pub(crate) mod opt;

mod book;

pub use dataset::{Dataset, FeatureData};
pub use error::{Error, Result};
pub use numerics::SeededRng;

use serde::{Deserialize, Serialize};

/// Provenance stamped into every artifact (checkpoints, reports, results
/// rows): enough to re-run the producing configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

impl ArtifactMeta {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        ArtifactMeta {
            seed,
            config_hash: config_hash.into(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}
