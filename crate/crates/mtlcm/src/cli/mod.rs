//! Config-driven experiment harness behind the `mtlcm` binary.
//!
//! Subcommands: `generate` (write a synthetic dataset), `run` (full
//! two-stage pipeline over a seed list), `reproduce` (benchmark table
//! grids with pass/fail thresholds), `plotdata` (convergence curves from
//! saved reports) and `ingest-superconduct` (parse the superconductivity
//! tables into the dataset format).

pub mod config;
pub mod pipeline;
pub mod reproduce;

pub use config::ExperimentConfig;
pub use pipeline::{generate, ingest_superconduct, plotdata, run, run_config, RunOptions, RunSummary};
pub use reproduce::{reproduce, Scale, TableId};
