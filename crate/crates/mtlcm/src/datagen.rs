//! Synthetic data generation.
//!
//! Each task partitions the latent coordinates into causal and spurious
//! sets. Causal latents are drawn first and combine linearly (with
//! task-specific weights) into the target; spurious latents are then
//! generated *from* the target with task-specific coefficients. Observations
//! are a fixed mixing of the latents shared across all tasks, plus isotropic
//! noise. Targets are standardized per task after generation and the affine
//! correction is recorded in the dataset metadata.
//!
//! Determinism: the mixing function is drawn from stream 0 of the dataset
//! seed and task `i` from stream `i + 1`, so task order never changes
//! results and tasks can be generated independently.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, TaskData, TaskMeta, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Kind of mixing function applied to the latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingKind {
    Identity,
    Orthogonal,
    RandomLinear,
    RandomMlp,
}

impl std::fmt::Display for MixingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MixingKind::Identity => "identity",
            MixingKind::Orthogonal => "orthogonal",
            MixingKind::RandomLinear => "random-linear",
            MixingKind::RandomMlp => "random-mlp",
        };
        f.write_str(s)
    }
}

fn default_sigma_s() -> f64 {
    0.1
}
fn default_sigma_o() -> f64 {
    0.01
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Number of causal coordinates per task (`1 <= n_causal < d`).
    pub n_causal: usize,
    pub n_tasks: usize,
    pub n_per_task: usize,
    /// Observation dimension (`>= latent_dim`).
    pub obs_dim: usize,
    pub mixing: MixingKind,
    /// Hidden width for the random-MLP mixing; defaults to `2 * obs_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
    #[serde(default = "default_sigma_s")]
    pub sigma_s: f64,
    #[serde(default = "default_sigma_o")]
    pub sigma_o: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.n_causal == 0 || self.n_causal >= self.latent_dim {
            return Err(Error::Config(format!(
                "n_causal must satisfy 1 <= n_causal < latent_dim, got {} with latent_dim {}",
                self.n_causal, self.latent_dim
            )));
        }
        if self.n_tasks == 0 || self.n_per_task == 0 {
            return Err(Error::Config("n_tasks and n_per_task must be positive".into()));
        }
        if self.obs_dim < self.latent_dim {
            return Err(Error::Config(format!(
                "obs_dim ({}) must be >= latent_dim ({})",
                self.obs_dim, self.latent_dim
            )));
        }
        if matches!(self.mixing, MixingKind::Identity | MixingKind::Orthogonal)
            && self.obs_dim != self.latent_dim
        {
            return Err(Error::Config(format!(
                "{} mixing requires obs_dim == latent_dim ({} != {})",
                self.mixing, self.obs_dim, self.latent_dim
            )));
        }
        if self.sigma_s < 0.0 || self.sigma_o < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden_dim(&self) -> usize {
        self.mlp_hidden.unwrap_or(2 * self.obs_dim)
    }
}

/// Ground-truth task variables on the generator side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroundTruth {
    /// Causal indicators: `true` marks a causal coordinate. Exactly
    /// `n_causal` entries are true.
    pub c_star: Vec<bool>,
    /// Regression weights, zero on spurious coordinates.
    pub w_star: DVector<f64>,
    /// Spurious coefficients, zero on causal coordinates.
    pub gamma_star: DVector<f64>,
    /// Bounds for the per-point target noise scale.
    pub sigma_p_bounds: (f64, f64),
}

/// A materialized mixing function from latents to observations.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixing {
    Identity { dim: usize },
    /// Orthogonal or general linear map, `obs_dim x d`.
    Linear { kind: MixingKind, matrix: DMatrix<f64> },
    /// One-hidden-layer ReLU network with zero biases:
    /// `x = w2 * relu(w1 * z)`.
    Mlp { w1: DMatrix<f64>, w2: DMatrix<f64> },
}

impl Mixing {
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Mixing::Identity { .. } => z.clone(),
            Mixing::Linear { matrix, .. } => matrix * z,
            Mixing::Mlp { w1, w2 } => w2 * (w1 * z).map(|v| v.max(0.0)),
        }
    }

    /// Applies the mixing to every row of `z` (`n x d` -> `n x obs_dim`).
    pub fn apply_rows(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Mixing::Identity { .. } => z.clone(),
            Mixing::Linear { matrix, .. } => z * matrix.transpose(),
            Mixing::Mlp { w1, w2 } => (z * w1.transpose()).map(|v| v.max(0.0)) * w2.transpose(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Mixing::Identity { dim } => *dim,
            Mixing::Linear { matrix, .. } => matrix.nrows(),
            Mixing::Mlp { w2, .. } => w2.nrows(),
        }
    }
}

/// `rows x cols` matrix with entries uniform on the Glorot interval
/// `[-sqrt(6/(fan_in+fan_out)), sqrt(6/(fan_in+fan_out))]`, where
/// `fan_in = cols` and `fan_out = rows`.
fn glorot_uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

/// Ratio of the largest to smallest singular value.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Draws the mixing function for a dataset.
///
/// Identity and orthogonal kinds require square maps; random linear maps are
/// resampled until their condition number is below 1e6; random MLPs draw
/// weights uniformly from the Glorot interval
/// `[-sqrt(6/(fan_in+fan_out)), sqrt(6/(fan_in+fan_out))]` with zero biases.
pub fn make_mixing(cfg: &GenConfig, rng: &mut SeededRng) -> Result<Mixing> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let obs = cfg.obs_dim;
    match cfg.mixing {
        MixingKind::Identity => Ok(Mixing::Identity { dim: d }),
        MixingKind::Orthogonal => {
            let g = DMatrix::from_fn(d, d, |_, _| rng.normal());
            let qr = g.qr();
            Ok(Mixing::Linear { kind: MixingKind::Orthogonal, matrix: qr.q() })
        }
        MixingKind::RandomLinear => {
            for _ in 0..100 {
                let m = DMatrix::from_fn(obs, d, |_, _| rng.normal());
                if condition_number(&m) < 1e6 {
                    return Ok(Mixing::Linear { kind: MixingKind::RandomLinear, matrix: m });
                }
            }
            Err(Error::Numerical(
                "failed to sample a well-conditioned linear mixing in 100 tries".into(),
            ))
        }
        MixingKind::RandomMlp => {
            let hidden = cfg.mlp_hidden_dim();
            let w1 = glorot_uniform(hidden, d, rng);
            let w2 = glorot_uniform(obs, hidden, rng);
            Ok(Mixing::Mlp { w1, w2 })
        }
    }
}

/// Samples the ground-truth task variables: a uniform `n_causal`-subset of
/// causal coordinates, weights `U(0,1)` on causal coordinates, spurious
/// coefficients `U(-1,1)` elsewhere.
pub fn sample_task_truth(cfg: &GenConfig, rng: &mut SeededRng) -> TaskGroundTruth {
    let d = cfg.latent_dim;
    let causal_idx = rng.subset(d, cfg.n_causal);
    let mut c_star = vec![false; d];
    for &j in &causal_idx {
        c_star[j] = true;
    }
    let mut w_star = DVector::zeros(d);
    for j in 0..d {
        if c_star[j] {
            w_star[j] = rng.uniform();
        }
    }
    let mut gamma_star = DVector::zeros(d);
    for j in 0..d {
        if !c_star[j] {
            gamma_star[j] = rng.uniform_range(-1.0, 1.0);
        }
    }
    TaskGroundTruth { c_star, w_star, gamma_star, sigma_p_bounds: (2.0, 3.0) }
}

/// Output of [`generate_task`]: the task data plus the standardization
/// constants applied to its targets.
#[derive(Debug, Clone)]
pub struct GeneratedTask {
    pub data: TaskData,
    pub y_offset: f64,
    pub y_scale: f64,
}

/// Generates one task.
///
/// Per point, in draw order: causal latents `N(0, 1)` (ascending
/// coordinate), the point's target noise scale `U(sigma_p_bounds)`, the
/// target `y = w* . z + eps_p`, spurious latents `gamma* y + eps_s` with
/// `eps_s ~ N(0, sigma_s^2)` (ascending coordinate), and the observation
/// `mixing(z) + eps_o`. Targets are then standardized to mean 0 and unit
/// sample variance.
///
/// Causal latents are standard Gaussian: that is what makes the
/// conditional variance of a coordinate depend on its role (1 when
/// causal, `sigma_s^2` when spurious), which is exactly the variability
/// stage 2 needs. Giving causal latents variance `sigma_s^2` instead
/// would make the conditional covariance task-independent and leave the
/// likelihood blind to rotations.
pub fn generate_task(
    cfg: &GenConfig,
    truth: &TaskGroundTruth,
    mixing: &Mixing,
    rng: &mut SeededRng,
) -> GeneratedTask {
    let d = cfg.latent_dim;
    let n = cfg.n_per_task;
    let obs = cfg.obs_dim;
    let mut z = DMatrix::<f64>::zeros(n, d);
    let mut y_raw = DVector::<f64>::zeros(n);
    for i in 0..n {
        for j in 0..d {
            if truth.c_star[j] {
                z[(i, j)] = rng.normal();
            }
        }
        let (lo, hi) = truth.sigma_p_bounds;
        let sigma_p = rng.uniform_range(lo, hi);
        let mut y = sigma_p * rng.normal();
        for j in 0..d {
            if truth.c_star[j] {
                y += truth.w_star[j] * z[(i, j)];
            }
        }
        y_raw[i] = y;
        for j in 0..d {
            if !truth.c_star[j] {
                z[(i, j)] = truth.gamma_star[j] * y + cfg.sigma_s * rng.normal();
            }
        }
    }
    let mut x = mixing.apply_rows(&z);
    for i in 0..n {
        for j in 0..obs {
            x[(i, j)] += cfg.sigma_o * rng.normal();
        }
    }
    let (y, y_offset, y_scale) = standardize(&y_raw);
    GeneratedTask { data: TaskData { x: Some(x), y, z_star: Some(z) }, y_offset, y_scale }
}

/// Standardizes to mean zero and unit sample variance (n-1 denominator).
/// Degenerate vectors (variance below 1e-24) keep scale 1.
pub(crate) fn standardize(v: &DVector<f64>) -> (DVector<f64>, f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    (v.map(|x| (x - mean) / scale), mean, scale)
}

/// Generates a full dataset: one mixing function shared across tasks, one
/// forked RNG stream per task.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, Vec<TaskGroundTruth>, Mixing)> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mixing = make_mixing(cfg, &mut root.fork(0))?;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut truths = Vec::with_capacity(cfg.n_tasks);
    let mut task_meta = Vec::with_capacity(cfg.n_tasks);
    for i in 0..cfg.n_tasks {
        let mut stream = root.fork(1 + i as u64);
        let truth = sample_task_truth(cfg, &mut stream);
        let generated = generate_task(cfg, &truth, &mixing, &mut stream);
        task_meta.push(TaskMeta {
            y_offset: generated.y_offset,
            y_scale: generated.y_scale,
            name: None,
        });
        tasks.push(generated.data);
        truths.push(truth);
    }
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        kind: "synthetic".into(),
        obs_dim: cfg.obs_dim,
        n_tasks: cfg.n_tasks,
        latent_dim: Some(cfg.latent_dim),
        gen: Some(cfg.clone()),
        shared_design: false,
        features_standardized: false,
        feature_stats: None,
        real_source: None,
        tasks: task_meta,
    };
    let dataset = Dataset { meta, tasks, shared_design: None };
    dataset.validate()?;
    Ok((dataset, truths, mixing))
}
