//! Real-data ingestion for the superconductivity benchmark.
//!
//! The standard distribution ships two aligned tables: an
//! element-composition table (one column per chemical element, discrete
//! atom counts, plus `critical_temp` and a `material` formula string) and a
//! derived-properties table (statistical summaries of elemental properties
//! plus `critical_temp`). Rows describe the same superconductors in the
//! same order.
//!
//! Ingestion regresses the derived properties from the element counts: the
//! element-count columns become the shared design matrix and every derived
//! property becomes one task. `critical_temp` is excluded from both sides,
//! and `number_of_elements` is excluded from the targets, leaving the 80
//! derived property statistics as tasks. The selected target columns are
//! recorded in the dataset metadata.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::standardize;
use crate::dataset::{
    Dataset, DatasetMeta, RealSource, TaskData, TaskMeta, DATASET_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Columns never used as features or targets.
const FEATURE_DROP: [&str; 2] = ["critical_temp", "material"];
const TARGET_DROP: [&str; 2] = ["critical_temp", "number_of_elements"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealDatasetSpec {
    pub features_path: PathBuf,
    pub targets_path: PathBuf,
    /// Expected row count; `None` skips the check. The full benchmark has
    /// 21,263 rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_expected_rows: Option<usize>,
    /// Standardize feature columns to zero mean, unit variance.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Optional content hashes verified before parsing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_sha256_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_sha256_targets: Option<String>,
}

fn default_true() -> bool {
    true
}

/// Numeric table with named columns.
struct Table {
    headers: Vec<String>,
    /// Row-major values.
    values: Vec<f64>,
    n_rows: usize,
}

fn read_numeric_table(path: &Path, skip_columns: &[&str]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let raw_headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let keep: Vec<usize> = raw_headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !skip_columns.contains(&h.as_str()))
        .map(|(i, _)| i)
        .collect();
    let headers: Vec<String> = keep.iter().map(|&i| raw_headers[i].clone()).collect();
    let mut values = Vec::new();
    let mut n_rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != raw_headers.len() {
            return Err(Error::Data(format!(
                "{}: row {r} has {} fields, header has {}",
                path.display(),
                record.len(),
                raw_headers.len()
            )));
        }
        for &c in &keep {
            let field = record.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric value {:?} at row {r}, column {:?}",
                    path.display(),
                    field,
                    raw_headers[c]
                ))
            })?;
            values.push(v);
        }
        n_rows += 1;
    }
    Ok(Table { headers, values, n_rows })
}

fn verify_hash(path: &Path, expected: &Option<String>) -> Result<()> {
    if let Some(expected) = expected {
        let bytes = std::fs::read(path)?;
        let digest = hex_digest(&bytes);
        if !digest.eq_ignore_ascii_case(expected) {
            return Err(Error::Data(format!(
                "{}: content hash {digest} does not match expected {expected}",
                path.display()
            )));
        }
    }
    Ok(())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Loads the superconductivity tables into a shared-design dataset with one
/// standardized regression task per derived-property column.
pub fn load_superconductivity(spec: &RealDatasetSpec) -> Result<Dataset> {
    verify_hash(&spec.features_path, &spec.expected_sha256_features)?;
    verify_hash(&spec.targets_path, &spec.expected_sha256_targets)?;
    let features = read_numeric_table(&spec.features_path, &FEATURE_DROP)?;
    let targets = read_numeric_table(&spec.targets_path, &TARGET_DROP)?;
    if features.n_rows != targets.n_rows {
        return Err(Error::Data(format!(
            "feature table has {} rows, target table {}",
            features.n_rows, targets.n_rows
        )));
    }
    if let Some(expected) = spec.n_expected_rows {
        if features.n_rows != expected {
            return Err(Error::Data(format!(
                "expected {expected} rows, found {}",
                features.n_rows
            )));
        }
    }
    let n = features.n_rows;
    let obs_dim = features.headers.len();
    let n_tasks = targets.headers.len();
    if n == 0 || obs_dim == 0 || n_tasks == 0 {
        return Err(Error::Data("empty feature or target table".into()));
    }

    let mut design = DMatrix::from_row_slice(n, obs_dim, &features.values);
    let feature_stats = if spec.standardize {
        let mut stats = Vec::with_capacity(obs_dim);
        for j in 0..obs_dim {
            let col = DVector::from_column_slice(design.column(j).as_slice());
            let (std_col, mean, scale) = standardize(&col);
            design.column_mut(j).copy_from(&std_col);
            stats.push((mean, scale));
        }
        Some(stats)
    } else {
        None
    };

    let mut tasks = Vec::with_capacity(n_tasks);
    let mut task_meta = Vec::with_capacity(n_tasks);
    for (t, name) in targets.headers.iter().enumerate() {
        let raw = DVector::from_fn(n, |i, _| targets.values[i * n_tasks + t]);
        let (y, offset, scale) = standardize(&raw);
        tasks.push(TaskData { x: None, y, z_star: None });
        task_meta.push(TaskMeta { y_offset: offset, y_scale: scale, name: Some(name.clone()) });
    }

    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        kind: "real".into(),
        obs_dim,
        n_tasks,
        latent_dim: None,
        gen: None,
        shared_design: true,
        features_standardized: spec.standardize,
        feature_stats,
        real_source: Some(RealSource {
            features_path: spec.features_path.display().to_string(),
            targets_path: spec.targets_path.display().to_string(),
            target_columns: targets.headers.clone(),
        }),
        tasks: task_meta,
    };
    let dataset = Dataset { meta, tasks, shared_design: Some(design) };
    dataset.validate()?;
    Ok(dataset)
}

/// Uniform row and task subsets, deterministic per RNG stream. The row
/// subset is shared across tasks so rows stay aligned.
pub fn subsample(
    dataset: &Dataset,
    n_rows: usize,
    n_tasks: usize,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    dataset.validate()?;
    let total_rows = dataset.tasks[0].y.len();
    if dataset.tasks.iter().any(|t| t.y.len() != total_rows) {
        return Err(Error::Data(
            "subsample requires equal row counts across tasks".into(),
        ));
    }
    if n_rows > total_rows {
        return Err(Error::Usage(format!(
            "requested {n_rows} rows, dataset has {total_rows}"
        )));
    }
    if n_tasks > dataset.n_tasks() {
        return Err(Error::Usage(format!(
            "requested {n_tasks} tasks, dataset has {}",
            dataset.n_tasks()
        )));
    }
    let row_idx = rng.subset(total_rows, n_rows);
    let task_idx = rng.subset(dataset.n_tasks(), n_tasks);

    let pick_rows = |m: &DMatrix<f64>| -> DMatrix<f64> {
        DMatrix::from_fn(row_idx.len(), m.ncols(), |r, c| m[(row_idx[r], c)])
    };
    let shared_design = dataset.shared_design.as_ref().map(pick_rows);
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut task_meta = Vec::with_capacity(n_tasks);
    for &t in &task_idx {
        let src = &dataset.tasks[t];
        tasks.push(TaskData {
            x: src.x.as_ref().map(pick_rows),
            y: DVector::from_fn(row_idx.len(), |r, _| src.y[row_idx[r]]),
            z_star: src.z_star.as_ref().map(pick_rows),
        });
        task_meta.push(dataset.meta.tasks[t].clone());
    }
    let mut meta = dataset.meta.clone();
    meta.n_tasks = n_tasks;
    meta.tasks = task_meta;
    if let Some(source) = &mut meta.real_source {
        source.target_columns = task_idx
            .iter()
            .filter_map(|&t| dataset.meta.tasks[t].name.clone())
            .collect();
    }
    let out = Dataset { meta, tasks, shared_design };
    out.validate()?;
    Ok(out)
}
