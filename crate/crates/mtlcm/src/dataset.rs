//! In-memory and on-disk dataset representation.
//!
//! A dataset is a collection of regression tasks over a common latent space.
//! Synthetic tasks carry their own design matrix and the ground-truth
//! latents; real datasets share a single design matrix across all tasks
//! (every task regresses a different target from the same rows).
//!
//! On disk, a dataset is a directory holding `meta.json` plus one
//! `task_{i}.csv` per task with header `z_0..z_{d-1},y,x_0..x_{obs-1}`
//! (the `z_*` columns are omitted when ground-truth latents are unknown).
//! Floats are written with 17 significant digits so the round trip is
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One regression task: targets, optional per-task design matrix, optional
/// ground-truth latents (rows aligned across all three).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Observations, `n x obs_dim`. `None` when the dataset has a shared
    /// design matrix.
    pub x: Option<DMatrix<f64>>,
    /// Standardized targets, length `n`.
    pub y: DVector<f64>,
    /// Ground-truth latents, `n x d`; absent for real data.
    pub z_star: Option<DMatrix<f64>>,
}

/// Per-task metadata recorded alongside the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    /// Standardization applied to the raw targets: `y = (y_raw - offset) / scale`.
    pub y_offset: f64,
    pub y_scale: f64,
    /// Target column name for real data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Provenance of an ingested real dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealSource {
    pub features_path: String,
    pub targets_path: String,
    /// The target columns actually selected as tasks, in task order.
    pub target_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    /// "synthetic" or "real".
    pub kind: String,
    pub obs_dim: usize,
    pub n_tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Generator configuration for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenConfig>,
    /// True when all tasks share one design matrix (real data).
    #[serde(default)]
    pub shared_design: bool,
    /// True when feature columns were standardized at ingestion.
    #[serde(default)]
    pub features_standardized: bool,
    /// Per-feature (mean, std) used for standardization, when applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_stats: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_source: Option<RealSource>,
    pub tasks: Vec<TaskMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub tasks: Vec<TaskData>,
    /// Single design matrix shared by all tasks (real data).
    pub shared_design: Option<DMatrix<f64>>,
}

impl Dataset {
    /// Checks the structural invariants: exactly one design source, aligned
    /// row counts, consistent dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Data("dataset has no tasks".into()));
        }
        if self.tasks.len() != self.meta.tasks.len() {
            return Err(Error::Data(format!(
                "{} tasks but {} task metadata entries",
                self.tasks.len(),
                self.meta.tasks.len()
            )));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            match (&task.x, &self.shared_design) {
                (Some(x), None) => {
                    if x.nrows() != task.y.len() {
                        return Err(Error::Data(format!(
                            "task {i}: {} x rows vs {} targets",
                            x.nrows(),
                            task.y.len()
                        )));
                    }
                    if x.ncols() != self.meta.obs_dim {
                        return Err(Error::Data(format!(
                            "task {i}: {} observed columns, expected {}",
                            x.ncols(),
                            self.meta.obs_dim
                        )));
                    }
                }
                (None, Some(shared)) => {
                    if shared.nrows() != task.y.len() {
                        return Err(Error::Data(format!(
                            "task {i}: shared design has {} rows vs {} targets",
                            shared.nrows(),
                            task.y.len()
                        )));
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "task {i}: exactly one of per-task x or shared design must be present"
                    )));
                }
            }
            if let Some(z) = &task.z_star {
                if z.nrows() != task.y.len() {
                    return Err(Error::Data(format!(
                        "task {i}: {} latent rows vs {} targets",
                        z.nrows(),
                        task.y.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.meta.obs_dim
    }

    /// Design matrix for task `t`.
    pub fn x_for(&self, t: usize) -> &DMatrix<f64> {
        self.tasks[t]
            .x
            .as_ref()
            .or(self.shared_design.as_ref())
            .expect("validated dataset has a design matrix")
    }

    /// Total number of (task, row) pairs.
    pub fn n_rows_total(&self) -> usize {
        self.tasks.iter().map(|t| t.y.len()).sum()
    }

    /// Writes the dataset directory (`meta.json` + `task_{i}.csv`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let meta_json = serde_json::to_string_pretty(&self.meta)?;
        fs::write(dir.join("meta.json"), meta_json)?;
        for (i, task) in self.tasks.iter().enumerate() {
            let path = dir.join(format!("task_{i}.csv"));
            let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
            let d = task.z_star.as_ref().map_or(0, |z| z.ncols());
            let x = self.x_for(i);
            let mut header: Vec<String> = (0..d).map(|j| format!("z_{j}")).collect();
            header.push("y".into());
            header.extend((0..x.ncols()).map(|j| format!("x_{j}")));
            writeln!(out, "{}", header.join(","))?;
            for r in 0..task.y.len() {
                let mut fields: Vec<String> = Vec::with_capacity(d + 1 + x.ncols());
                if let Some(z) = &task.z_star {
                    fields.extend((0..d).map(|j| fmt_float(z[(r, j)])));
                }
                fields.push(fmt_float(task.y[r]));
                fields.extend((0..x.ncols()).map(|j| fmt_float(x[(r, j)])));
                writeln!(out, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }

    /// Reads a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta_raw = fs::read_to_string(dir.join("meta.json"))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_raw)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset format version {}",
                meta.format_version
            )));
        }
        let mut tasks = Vec::with_capacity(meta.n_tasks);
        let mut shared_design = None;
        for i in 0..meta.n_tasks {
            let path = dir.join(format!("task_{i}.csv"));
            let (z, y, x) = read_task_csv(&path, meta.obs_dim)?;
            if meta.shared_design {
                if i == 0 {
                    shared_design = Some(x);
                }
                tasks.push(TaskData { x: None, y, z_star: z });
            } else {
                tasks.push(TaskData { x: Some(x), y, z_star: z });
            }
        }
        let ds = Dataset { meta, tasks, shared_design };
        ds.validate()?;
        Ok(ds)
    }
}

/// 17 significant digits: enough to reproduce any f64 bit pattern exactly.
pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn read_task_csv(
    path: &Path,
    obs_dim: usize,
) -> Result<(Option<DMatrix<f64>>, DVector<f64>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with("z_")).count();
    let expected_cols = d + 1 + obs_dim;
    if header.len() != expected_cols {
        return Err(Error::Data(format!(
            "{}: expected {expected_cols} columns, found {}",
            path.display(),
            header.len()
        )));
    }
    let mut z_rows: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let mut values = Vec::with_capacity(expected_cols);
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric value {field:?} at row {r}, column {c}",
                    path.display()
                ))
            })?;
            values.push(v);
        }
        z_rows.extend_from_slice(&values[..d]);
        ys.push(values[d]);
        x_rows.extend_from_slice(&values[d + 1..]);
    }
    let n = ys.len();
    let z = if d > 0 {
        Some(DMatrix::from_row_slice(n, d, &z_rows))
    } else {
        None
    };
    let x = DMatrix::from_row_slice(n, obs_dim, &x_rows);
    Ok((z, DVector::from_vec(ys), x))
}

/// Stage-2 input: per-task feature rows `h` with their targets. Real
/// datasets share the feature matrix across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureData {
    pub tasks: Vec<FeatureTask>,
    pub shared_h: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTask {
    /// `n x d` feature rows; `None` when `shared_h` is used.
    pub h: Option<DMatrix<f64>>,
    pub y: DVector<f64>,
}

impl FeatureData {
    pub fn h_for(&self, t: usize) -> &DMatrix<f64> {
        self.tasks[t]
            .h
            .as_ref()
            .or(self.shared_h.as_ref())
            .expect("feature data has a feature matrix")
    }

    pub fn latent_dim(&self) -> usize {
        self.h_for(0).ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_rows_total(&self) -> usize {
        self.tasks.iter().map(|t| t.y.len()).sum()
    }

    /// All feature rows stacked task by task (`n_total x d`).
    pub fn stacked_h(&self) -> DMatrix<f64> {
        let d = self.latent_dim();
        let n = self.n_rows_total();
        let mut out = DMatrix::zeros(n, d);
        let mut r = 0;
        for t in 0..self.tasks.len() {
            let h = self.h_for(t);
            out.rows_mut(r, h.nrows()).copy_from(h);
            r += h.nrows();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_synthetic() -> Dataset {
        let mut rng = crate::numerics::SeededRng::new(3);
        let n = 7;
        let d = 2;
        let obs = 3;
        let tasks: Vec<TaskData> = (0..2)
            .map(|_| {
                let z = DMatrix::from_fn(n, d, |_, _| rng.normal());
                let x = DMatrix::from_fn(n, obs, |_, _| rng.normal() * 1e-8);
                let y = DVector::from_fn(n, |_, _| rng.normal() * 1e12);
                TaskData { x: Some(x), y, z_star: Some(z) }
            })
            .collect();
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            kind: "synthetic".into(),
            obs_dim: obs,
            n_tasks: 2,
            latent_dim: Some(d),
            gen: None,
            shared_design: false,
            features_standardized: false,
            feature_stats: None,
            real_source: None,
            tasks: vec![
                TaskMeta { y_offset: 0.25, y_scale: 1.5, name: None },
                TaskMeta { y_offset: -0.5, y_scale: 2.0, name: None },
            ],
        };
        Dataset { meta, tasks, shared_design: None }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = tiny_synthetic();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        for (a, b) in ds.tasks.iter().zip(back.tasks.iter()) {
            let (ax, bx) = (a.x.as_ref().unwrap(), b.x.as_ref().unwrap());
            assert!(ax.iter().zip(bx.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert!(a.y.iter().zip(b.y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
            let (az, bz) = (a.z_star.as_ref().unwrap(), b.z_star.as_ref().unwrap());
            assert!(az.iter().zip(bz.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn validate_catches_misaligned_rows() {
        let mut ds = tiny_synthetic();
        ds.tasks[0].y = DVector::zeros(3);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn shared_design_roundtrip() {
        let mut ds = tiny_synthetic();
        let x0 = ds.tasks[0].x.take().unwrap();
        ds.tasks[1].x = None;
        for t in &mut ds.tasks {
            t.z_star = None;
        }
        ds.shared_design = Some(x0);
        ds.meta.shared_design = true;
        ds.meta.kind = "real".into();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert!(back.shared_design.is_some());
        assert_eq!(back.x_for(0), back.x_for(1));
        assert!(back
            .x_for(0)
            .iter()
            .zip(ds.x_for(0).iter())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    proptest! {
        #[test]
        fn float_format_roundtrips(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let parsed: f64 = fmt_float(v).parse().unwrap();
            prop_assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }
}
