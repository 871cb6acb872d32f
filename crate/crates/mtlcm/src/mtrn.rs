//! Stage 1: multi-task regression network.
//!
//! A feature extractor shared across tasks feeds one linear head per task:
//! `f_t(x) = w_t . h(x)`. The Gaussian likelihood has fixed variance, so
//! exact maximum likelihood reduces to mean squared error plus a constant
//! (the constant is kept so the loss is a true negative log-likelihood).
//! With enough linearly independent heads, the trained extractor recovers
//! the data-generating latents up to an invertible linear map, which is
//! what stage 2 undoes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureData, FeatureTask};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::opt::Adam;
use crate::ArtifactMeta;

pub const MTRN_FORMAT_VERSION: u32 = 1;

const LN_TAU: f64 = 1.8378770664093453; // ln(2*pi)

/// Feature extractor architectures.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    /// Pass-through: features are the raw observations.
    Identity { dim: usize },
    /// Single linear map, `latent_dim x obs_dim`, no bias.
    Linear { weight: DMatrix<f64> },
    /// One-hidden-layer ReLU network.
    Mlp {
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    },
}

impl Extractor {
    pub fn obs_dim(&self) -> usize {
        match self {
            Extractor::Identity { dim } => *dim,
            Extractor::Linear { weight } => weight.ncols(),
            Extractor::Mlp { w1, .. } => w1.ncols(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Extractor::Identity { dim } => *dim,
            Extractor::Linear { weight } => weight.nrows(),
            Extractor::Mlp { w2, .. } => w2.nrows(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Extractor::Identity { .. } => "identity",
            Extractor::Linear { .. } => "linear",
            Extractor::Mlp { .. } => "mlp",
        }
    }
}

/// Architecture requested for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorSpec {
    Identity,
    Linear { latent_dim: usize },
    Mlp {
        latent_dim: usize,
        /// Hidden width; defaults to `2 * obs_dim`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden: Option<usize>,
    },
}

/// First-order training configuration (shared by both stages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Mini-batch size; stage 2 trains full-batch and ignores this.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs (stage 1) or steps (stage 2) without improvement before
    /// stopping early.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "learning_rate, batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) must not exceed max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Trained stage-1 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MtrnParams {
    pub extractor: Extractor,
    /// Per-task regression weights, `n_tasks x latent_dim`.
    pub heads: DMatrix<f64>,
    /// Fixed likelihood standard deviation.
    pub sigma_r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running mean of mini-batch losses over the epoch.
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
}

/// `h(x)` for a single observation.
pub fn features(params: &MtrnParams, x: &DVector<f64>) -> DVector<f64> {
    match &params.extractor {
        Extractor::Identity { .. } => x.clone(),
        Extractor::Linear { weight } => weight * x,
        Extractor::Mlp { w1, b1, w2, b2 } => {
            let hidden = (w1 * x + b1).map(|v| v.max(0.0));
            w2 * hidden + b2
        }
    }
}

/// `h(x)` for every row of `x` (`n x obs` -> `n x d`).
pub fn features_matrix(params: &MtrnParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    match &params.extractor {
        Extractor::Identity { .. } => x.clone(),
        Extractor::Linear { weight } => x * weight.transpose(),
        Extractor::Mlp { w1, b1, w2, b2 } => {
            let mut a1 = x * w1.transpose();
            for mut row in a1.row_iter_mut() {
                row += b1.transpose();
            }
            let mut h = a1.map(|v| v.max(0.0)) * w2.transpose();
            for mut row in h.row_iter_mut() {
                row += b2.transpose();
            }
            h
        }
    }
}

/// Prediction for task `t`: `w_t . h(x)`.
pub fn predict(params: &MtrnParams, x: &DVector<f64>, t: usize) -> Result<f64> {
    if t >= params.heads.nrows() {
        return Err(Error::Dim(format!(
            "task index {t} out of range ({} tasks)",
            params.heads.nrows()
        )));
    }
    Ok(params.heads.row(t).transpose().dot(&features(params, x)))
}

/// Exact mean negative log-likelihood over every (task, row) pair.
pub fn nll(params: &MtrnParams, dataset: &Dataset) -> Result<f64> {
    dataset.validate()?;
    let sigma2 = params.sigma_r * params.sigma_r;
    let constant = 0.5 * (LN_TAU + sigma2.ln());
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..dataset.n_tasks() {
        let h = features_matrix(params, dataset.x_for(t));
        let preds = &h * params.heads.row(t).transpose();
        let y = &dataset.tasks[t].y;
        total += preds
            .iter()
            .zip(y.iter())
            .map(|(p, v)| constant + (p - v) * (p - v) / (2.0 * sigma2))
            .sum::<f64>();
        count += y.len();
    }
    Ok(total / count as f64)
}

/// Extracts stage-2 inputs: per-task feature rows with their targets.
/// Shared-design datasets get a single shared feature matrix.
pub fn extract_features(params: &MtrnParams, dataset: &Dataset) -> Result<FeatureData> {
    dataset.validate()?;
    if let Some(shared) = &dataset.shared_design {
        let h = features_matrix(params, shared);
        let tasks = dataset
            .tasks
            .iter()
            .map(|t| FeatureTask { h: None, y: t.y.clone() })
            .collect();
        Ok(FeatureData { tasks, shared_h: Some(h) })
    } else {
        let tasks = dataset
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| FeatureTask {
                h: Some(features_matrix(params, dataset.x_for(t))),
                y: task.y.clone(),
            })
            .collect();
        Ok(FeatureData { tasks, shared_h: None })
    }
}

/// Numerical-rank diagnostics of a weight matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankDiag {
    pub rank: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub condition: f64,
}

/// SVD-based rank at tolerance `1e-8 * sigma_max`.
pub fn rank_diagnostics(m: &DMatrix<f64>) -> RankDiag {
    let svd = m.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let tol = 1e-8 * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let condition = if sigma_min > 0.0 { sigma_max / sigma_min } else { f64::INFINITY };
    RankDiag { rank, sigma_max, sigma_min, condition }
}

/// Rank diagnostics of the learned heads; warns when the heads do not span
/// the latent space (the stage-1 identifiability condition).
pub fn check_head_rank(params: &MtrnParams) -> RankDiag {
    let diag = rank_diagnostics(&params.heads);
    let d = params.extractor.latent_dim();
    if diag.rank < d {
        log::warn!(
            "head matrix rank {} < latent dim {}: representations may only be identified on a subspace",
            diag.rank,
            d
        );
    }
    diag
}

struct Batch {
    x: DMatrix<f64>,
    y: DVector<f64>,
    tasks: Vec<usize>,
}

fn gather_batch(dataset: &Dataset, pairs: &[(usize, usize)]) -> Batch {
    let obs = dataset.obs_dim();
    let b = pairs.len();
    let mut x = DMatrix::zeros(b, obs);
    let mut y = DVector::zeros(b);
    let mut tasks = Vec::with_capacity(b);
    for (r, &(t, row)) in pairs.iter().enumerate() {
        x.row_mut(r).copy_from(&dataset.x_for(t).row(row));
        y[r] = dataset.tasks[t].y[row];
        tasks.push(t);
    }
    Batch { x, y, tasks }
}

/// Gradient blocks in optimizer order: extractor tensors then heads.
struct Grads {
    blocks: Vec<DMatrix<f64>>,
}

/// Mean loss and parameter gradients on one batch.
fn loss_and_grad(params: &MtrnParams, batch: &Batch) -> (f64, Grads) {
    let b = batch.y.len();
    let sigma2 = params.sigma_r * params.sigma_r;
    let constant = 0.5 * (LN_TAU + sigma2.ln());

    // Forward, keeping the intermediates needed for backprop.
    let (h, mlp_cache) = match &params.extractor {
        Extractor::Identity { .. } => (batch.x.clone(), None),
        Extractor::Linear { weight } => (&batch.x * weight.transpose(), None),
        Extractor::Mlp { w1, b1, w2, b2 } => {
            let mut a1 = &batch.x * w1.transpose();
            for mut row in a1.row_iter_mut() {
                row += b1.transpose();
            }
            let z = a1.map(|v| v.max(0.0));
            let mut hm = &z * w2.transpose();
            for mut row in hm.row_iter_mut() {
                row += b2.transpose();
            }
            (hm, Some((a1, z)))
        }
    };

    let d = h.ncols();
    let mut loss = 0.0;
    let mut dpred = DVector::<f64>::zeros(b);
    for i in 0..b {
        let pred = h.row(i).transpose().dot(&params.heads.row(batch.tasks[i]).transpose());
        let res = pred - batch.y[i];
        loss += constant + res * res / (2.0 * sigma2);
        dpred[i] = res / (sigma2 * b as f64);
    }
    loss /= b as f64;

    let mut head_grad = DMatrix::<f64>::zeros(params.heads.nrows(), d);
    let mut delta_h = DMatrix::<f64>::zeros(b, d);
    for i in 0..b {
        let t = batch.tasks[i];
        for j in 0..d {
            head_grad[(t, j)] += dpred[i] * h[(i, j)];
            delta_h[(i, j)] = dpred[i] * params.heads[(t, j)];
        }
    }

    let mut blocks = Vec::new();
    match &params.extractor {
        Extractor::Identity { .. } => {}
        Extractor::Linear { .. } => {
            blocks.push(delta_h.transpose() * &batch.x);
        }
        Extractor::Mlp { w2, .. } => {
            let (a1, z) = mlp_cache.as_ref().expect("mlp cache present");
            let dw2 = delta_h.transpose() * z;
            let db2 = delta_h.row_sum().transpose();
            let delta_z = &delta_h * w2;
            let delta_a = delta_z.zip_map(a1, |g, a| if a > 0.0 { g } else { 0.0 });
            let dw1 = delta_a.transpose() * &batch.x;
            let db1 = delta_a.row_sum().transpose();
            blocks.push(dw1);
            blocks.push(DMatrix::from_column_slice(db1.len(), 1, db1.as_slice()));
            blocks.push(dw2);
            blocks.push(DMatrix::from_column_slice(db2.len(), 1, db2.as_slice()));
        }
    }
    blocks.push(head_grad);
    (loss, Grads { blocks })
}

fn init_extractor(spec: &ExtractorSpec, obs_dim: usize, rng: &mut SeededRng) -> Result<Extractor> {
    let glorot = |rows: usize, cols: usize, rng: &mut SeededRng| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        DMatrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
    };
    match spec {
        ExtractorSpec::Identity => Ok(Extractor::Identity { dim: obs_dim }),
        ExtractorSpec::Linear { latent_dim } => {
            if *latent_dim == 0 || *latent_dim > obs_dim {
                return Err(Error::Config(format!(
                    "linear extractor latent_dim {latent_dim} must be in 1..={obs_dim}"
                )));
            }
            Ok(Extractor::Linear { weight: glorot(*latent_dim, obs_dim, rng) })
        }
        ExtractorSpec::Mlp { latent_dim, hidden } => {
            if *latent_dim == 0 {
                return Err(Error::Config("mlp extractor latent_dim must be positive".into()));
            }
            let hidden = hidden.unwrap_or(2 * obs_dim);
            Ok(Extractor::Mlp {
                w1: glorot(hidden, obs_dim, rng),
                b1: DVector::zeros(hidden),
                w2: glorot(*latent_dim, hidden, rng),
                b2: DVector::zeros(*latent_dim),
            })
        }
    }
}

fn param_block_sizes(params: &MtrnParams) -> Vec<usize> {
    let mut sizes = Vec::new();
    match &params.extractor {
        Extractor::Identity { .. } => {}
        Extractor::Linear { weight } => sizes.push(weight.len()),
        Extractor::Mlp { w1, b1, w2, b2 } => {
            sizes.extend([w1.len(), b1.len(), w2.len(), b2.len()]);
        }
    }
    sizes.push(params.heads.len());
    sizes
}

fn apply_adam(params: &mut MtrnParams, grads: &Grads, adam: &mut Adam) {
    let mut views: Vec<&mut [f64]> = Vec::new();
    match &mut params.extractor {
        Extractor::Identity { .. } => {}
        Extractor::Linear { weight } => views.push(weight.as_mut_slice()),
        Extractor::Mlp { w1, b1, w2, b2 } => {
            views.push(w1.as_mut_slice());
            views.push(b1.as_mut_slice());
            views.push(w2.as_mut_slice());
            views.push(b2.as_mut_slice());
        }
    }
    views.push(params.heads.as_mut_slice());
    let grad_slices: Vec<&[f64]> = grads.blocks.iter().map(|g| g.as_slice()).collect();
    adam.step(&mut views, &grad_slices);
}

/// Trains by mini-batch Adam on the exact negative log-likelihood with a
/// 10% per-task validation holdout for early stopping. Deterministic per
/// seed; the parameters from the best validation epoch are returned.
pub fn train(
    dataset: &Dataset,
    spec: &ExtractorSpec,
    cfg: &TrainConfig,
) -> Result<(MtrnParams, TrainingTrace)> {
    cfg.validate()?;
    dataset.validate()?;
    let obs_dim = dataset.obs_dim();
    if matches!(spec, ExtractorSpec::Identity) {
        if let Some(d) = dataset.meta.latent_dim {
            if d != obs_dim {
                return Err(Error::Config(format!(
                    "identity extractor requires obs_dim == latent_dim ({obs_dim} != {d})"
                )));
            }
        }
    }

    let root = SeededRng::new(cfg.seed);
    let mut init_rng = root.fork(0);
    let extractor = init_extractor(spec, obs_dim, &mut init_rng)?;
    let d = extractor.latent_dim();
    let mut heads_rng = root.fork(1);
    let head_bound = (6.0 / (d + 1) as f64).sqrt();
    let heads = DMatrix::from_fn(dataset.n_tasks(), d, |_, _| {
        heads_rng.uniform_range(-head_bound, head_bound)
    });
    let mut params = MtrnParams { extractor, heads, sigma_r: 1.0 };

    // 10% per-task validation split (skipped for very small tasks).
    let split_rng = root.fork(2);
    let mut train_pairs: Vec<(usize, usize)> = Vec::new();
    let mut val_pairs: Vec<(usize, usize)> = Vec::new();
    for t in 0..dataset.n_tasks() {
        let n = dataset.tasks[t].y.len();
        let mut idx: Vec<usize> = (0..n).collect();
        split_rng.fork(t as u64).shuffle(&mut idx);
        let n_val = if n >= 10 { n / 10 } else { 0 };
        for (k, &row) in idx.iter().enumerate() {
            if k < n_val {
                val_pairs.push((t, row));
            } else {
                train_pairs.push((t, row));
            }
        }
    }
    // Keep validation evaluation order stable regardless of split order.
    val_pairs.sort_unstable();

    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, &param_block_sizes(&params));
    let shuffle_rng = root.fork(3);

    let mut trace = TrainingTrace::default();
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        shuffle_rng.fork(epoch as u64).shuffle(&mut train_pairs);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_pairs.chunks(cfg.batch_size) {
            let batch = gather_batch(dataset, chunk);
            let (loss, grads) = loss_and_grad(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss non-finite at epoch {epoch}, batch {batches}"
                )));
            }
            apply_adam(&mut params, &grads, &mut adam);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val_pairs.is_empty() {
            None
        } else {
            let batch = gather_batch(dataset, &val_pairs);
            Some(eval_loss(&params, &batch))
        };
        trace.epochs.push(EpochRecord { epoch, train_loss, val_loss });

        let monitored = val_loss.unwrap_or(train_loss);
        if monitored < best_loss {
            best_loss = monitored;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best_params, trace))
}

fn eval_loss(params: &MtrnParams, batch: &Batch) -> f64 {
    let sigma2 = params.sigma_r * params.sigma_r;
    let constant = 0.5 * (LN_TAU + sigma2.ln());
    let h = features_matrix(params, &batch.x);
    let mut loss = 0.0;
    for i in 0..batch.y.len() {
        let pred = h.row(i).transpose().dot(&params.heads.row(batch.tasks[i]).transpose());
        let res = pred - batch.y[i];
        loss += constant + res * res / (2.0 * sigma2);
    }
    loss / batch.y.len() as f64
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    /// `[rows, cols]`; vectors use `[len, 1]`.
    pub shape: [usize; 2],
    /// Row-major entries.
    pub data: Vec<f64>,
}

pub(crate) fn tensor_blob(name: &str, m: &DMatrix<f64>) -> TensorBlob {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    TensorBlob { name: name.into(), shape: [m.nrows(), m.ncols()], data }
}

pub(crate) fn blob_to_matrix(blob: &TensorBlob) -> Result<DMatrix<f64>> {
    let [r, c] = blob.shape;
    if blob.data.len() != r * c {
        return Err(Error::Data(format!(
            "tensor {}: {} values for shape {r}x{c}",
            blob.name,
            blob.data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(r, c, &blob.data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MtrnCheckpoint {
    pub format_version: u32,
    pub arch: ExtractorSpec,
    pub obs_dim: usize,
    pub n_tasks: usize,
    pub sigma_r: f64,
    pub tensors: Vec<TensorBlob>,
    pub train_config: TrainConfig,
    pub final_loss: f64,
    pub meta: ArtifactMeta,
}

/// Serializes trained parameters to `mtrn.json`.
pub fn save_checkpoint(
    params: &MtrnParams,
    cfg: &TrainConfig,
    final_loss: f64,
    meta: &ArtifactMeta,
    path: &std::path::Path,
) -> Result<()> {
    let mut tensors = Vec::new();
    let arch = match &params.extractor {
        Extractor::Identity { .. } => ExtractorSpec::Identity,
        Extractor::Linear { weight } => {
            tensors.push(tensor_blob("weight", weight));
            ExtractorSpec::Linear { latent_dim: weight.nrows() }
        }
        Extractor::Mlp { w1, b1, w2, b2 } => {
            tensors.push(tensor_blob("w1", w1));
            tensors.push(tensor_blob("b1", &DMatrix::from_column_slice(b1.len(), 1, b1.as_slice())));
            tensors.push(tensor_blob("w2", w2));
            tensors.push(tensor_blob("b2", &DMatrix::from_column_slice(b2.len(), 1, b2.as_slice())));
            ExtractorSpec::Mlp { latent_dim: w2.nrows(), hidden: Some(w1.nrows()) }
        }
    };
    tensors.push(tensor_blob("heads", &params.heads));
    let ckpt = MtrnCheckpoint {
        format_version: MTRN_FORMAT_VERSION,
        arch,
        obs_dim: params.extractor.obs_dim(),
        n_tasks: params.heads.nrows(),
        sigma_r: params.sigma_r,
        tensors,
        train_config: cfg.clone(),
        final_loss,
        meta: meta.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// Loads parameters from `mtrn.json`.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(MtrnParams, MtrnCheckpoint)> {
    let ckpt: MtrnCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ckpt.format_version != MTRN_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported mtrn checkpoint version {}",
            ckpt.format_version
        )));
    }
    let find = |name: &str| -> Result<DMatrix<f64>> {
        let blob = ckpt
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
        blob_to_matrix(blob)
    };
    let extractor = match &ckpt.arch {
        ExtractorSpec::Identity => Extractor::Identity { dim: ckpt.obs_dim },
        ExtractorSpec::Linear { .. } => Extractor::Linear { weight: find("weight")? },
        ExtractorSpec::Mlp { .. } => Extractor::Mlp {
            w1: find("w1")?,
            b1: DVector::from_column_slice(find("b1")?.as_slice()),
            w2: find("w2")?,
            b2: DVector::from_column_slice(find("b2")?.as_slice()),
        },
    };
    let heads = find("heads")?;
    let params = MtrnParams { extractor, heads, sigma_r: ckpt.sigma_r };
    Ok((params, ckpt))
}

// ---------------------------------------------------------------------------
// Flat parameter vector (used by the gradient checks)
// ---------------------------------------------------------------------------

/// Flattens every parameter tensor (optimizer block order, column-major
/// within each tensor) into one vector.
pub fn flatten_params(params: &MtrnParams) -> DVector<f64> {
    let mut out = Vec::new();
    match &params.extractor {
        Extractor::Identity { .. } => {}
        Extractor::Linear { weight } => out.extend_from_slice(weight.as_slice()),
        Extractor::Mlp { w1, b1, w2, b2 } => {
            out.extend_from_slice(w1.as_slice());
            out.extend_from_slice(b1.as_slice());
            out.extend_from_slice(w2.as_slice());
            out.extend_from_slice(b2.as_slice());
        }
    }
    out.extend_from_slice(params.heads.as_slice());
    DVector::from_vec(out)
}

/// Rebuilds parameters from a flat vector with the same shapes as `like`.
pub fn unflatten_params(like: &MtrnParams, flat: &DVector<f64>) -> MtrnParams {
    let mut cursor = 0usize;
    let mut take = |len: usize| {
        let slice = flat.as_slice()[cursor..cursor + len].to_vec();
        cursor += len;
        slice
    };
    let extractor = match &like.extractor {
        Extractor::Identity { dim } => Extractor::Identity { dim: *dim },
        Extractor::Linear { weight } => Extractor::Linear {
            weight: DMatrix::from_column_slice(weight.nrows(), weight.ncols(), &take(weight.len())),
        },
        Extractor::Mlp { w1, b1, w2, b2 } => Extractor::Mlp {
            w1: DMatrix::from_column_slice(w1.nrows(), w1.ncols(), &take(w1.len())),
            b1: DVector::from_column_slice(&take(b1.len())),
            w2: DMatrix::from_column_slice(w2.nrows(), w2.ncols(), &take(w2.len())),
            b2: DVector::from_column_slice(&take(b2.len())),
        },
    };
    let heads = DMatrix::from_column_slice(like.heads.nrows(), like.heads.ncols(), &take(like.heads.len()));
    MtrnParams { extractor, heads, sigma_r: like.sigma_r }
}

/// Full-dataset loss and gradient in the flat layout of [`flatten_params`].
/// Test-facing twin of the mini-batch path used in training.
pub fn nll_and_grad_flat(params: &MtrnParams, dataset: &Dataset) -> Result<(f64, DVector<f64>)> {
    let mut pairs = Vec::new();
    for t in 0..dataset.n_tasks() {
        for row in 0..dataset.tasks[t].y.len() {
            pairs.push((t, row));
        }
    }
    let batch = gather_batch(dataset, &pairs);
    let (loss, grads) = loss_and_grad(params, &batch);
    let mut flat = Vec::new();
    for block in &grads.blocks {
        flat.extend_from_slice(block.as_slice());
    }
    Ok((loss, DVector::from_vec(flat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, GenConfig, MixingKind};
    use crate::dataset::{DatasetMeta, TaskData, TaskMeta, DATASET_FORMAT_VERSION};
    use crate::numerics::finite_diff_grad;
    use approx::assert_abs_diff_eq;

    fn small_dataset(n_tasks: usize, n: usize, obs: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let tasks: Vec<TaskData> = (0..n_tasks)
            .map(|_| {
                let x = DMatrix::from_fn(n, obs, |_, _| rng.normal());
                let y = DVector::from_fn(n, |_, _| rng.normal());
                TaskData { x: Some(x), y, z_star: None }
            })
            .collect();
        Dataset {
            meta: DatasetMeta {
                format_version: DATASET_FORMAT_VERSION,
                kind: "synthetic".into(),
                obs_dim: obs,
                n_tasks,
                latent_dim: None,
                gen: None,
                shared_design: false,
                features_standardized: false,
                feature_stats: None,
                real_source: None,
                tasks: (0..n_tasks).map(|_| TaskMeta { y_offset: 0.0, y_scale: 1.0, name: None }).collect(),
            },
            tasks,
            shared_design: None,
        }
    }

    fn mlp_params(obs: usize, hidden: usize, d: usize, n_tasks: usize, seed: u64) -> MtrnParams {
        let mut rng = SeededRng::new(seed);
        MtrnParams {
            extractor: Extractor::Mlp {
                w1: DMatrix::from_fn(hidden, obs, |_, _| rng.normal() * 0.5),
                b1: DVector::from_fn(hidden, |_, _| rng.normal() * 0.1),
                w2: DMatrix::from_fn(d, hidden, |_, _| rng.normal() * 0.5),
                b2: DVector::from_fn(d, |_, _| rng.normal() * 0.1),
            },
            heads: DMatrix::from_fn(n_tasks, d, |_, _| rng.normal()),
            sigma_r: 1.0,
        }
    }

    #[test]
    fn identity_features_pass_through() {
        let params = MtrnParams {
            extractor: Extractor::Identity { dim: 3 },
            heads: DMatrix::zeros(1, 3),
            sigma_r: 1.0,
        };
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(features(&params, &x), x);
    }

    #[test]
    fn zero_hidden_weights_give_constant_features() {
        let b1 = DVector::from_vec(vec![0.5, -1.0]);
        let w2 = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let b2 = DVector::from_vec(vec![0.25]);
        let params = MtrnParams {
            extractor: Extractor::Mlp {
                w1: DMatrix::zeros(2, 3),
                b1: b1.clone(),
                w2: w2.clone(),
                b2: b2.clone(),
            },
            heads: DMatrix::zeros(1, 1),
            sigma_r: 1.0,
        };
        let expected = &w2 * b1.map(|v| v.max(0.0)) + &b2;
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let x = DVector::from_fn(3, |_, _| rng.normal());
            assert_abs_diff_eq!(features(&params, &x)[0], expected[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn features_match_plain_reevaluation() {
        // Independent layer-by-layer forward pass.
        let params = mlp_params(4, 6, 3, 2, 1);
        let (w1, b1, w2, b2) = match &params.extractor {
            Extractor::Mlp { w1, b1, w2, b2 } => (w1, b1, w2, b2),
            _ => unreachable!(),
        };
        let mut rng = SeededRng::new(2);
        for _ in 0..10 {
            let x = DVector::from_fn(4, |_, _| rng.normal());
            let mut hidden = DVector::zeros(6);
            for i in 0..6 {
                let mut acc = b1[i];
                for j in 0..4 {
                    acc += w1[(i, j)] * x[j];
                }
                hidden[i] = acc.max(0.0);
            }
            let mut out = DVector::zeros(3);
            for i in 0..3 {
                let mut acc = b2[i];
                for j in 0..6 {
                    acc += w2[(i, j)] * hidden[j];
                }
                out[i] = acc;
            }
            assert!((features(&params, &x) - out).norm() < 1e-12);
        }
    }

    #[test]
    fn predict_decomposes_into_features_dot_head() {
        let params = mlp_params(4, 6, 3, 5, 3);
        let mut rng = SeededRng::new(4);
        for t in 0..5 {
            let x = DVector::from_fn(4, |_, _| rng.normal());
            let manual = features(&params, &x).dot(&params.heads.row(t).transpose());
            assert_abs_diff_eq!(predict(&params, &x, t).unwrap(), manual, epsilon = 1e-14);
        }
    }

    #[test]
    fn predict_zero_head_is_zero_and_bad_task_errors() {
        let params = mlp_params(4, 6, 3, 2, 5);
        let mut zeroed = params.clone();
        zeroed.heads.row_mut(0).fill(0.0);
        let x = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
        assert_eq!(predict(&zeroed, &x, 0).unwrap(), 0.0);
        assert!(predict(&params, &x, 99).is_err());
    }

    #[test]
    fn nll_of_perfect_predictions_is_half_ln_tau() {
        // Heads and features conspire so predictions equal targets exactly.
        let n = 20;
        let mut rng = SeededRng::new(6);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.normal());
        let y = DVector::from_column_slice(x.column(0).as_slice());
        let mut ds = small_dataset(1, n, 1, 7);
        ds.tasks[0].x = Some(x);
        ds.tasks[0].y = y;
        let params = MtrnParams {
            extractor: Extractor::Identity { dim: 1 },
            heads: DMatrix::from_element(1, 1, 1.0),
            sigma_r: 1.0,
        };
        assert_abs_diff_eq!(nll(&params, &ds).unwrap(), 0.5 * LN_TAU, epsilon = 1e-12);
    }

    #[test]
    fn doubling_sigma_r_transforms_nll_per_gaussian_formula() {
        let ds = small_dataset(2, 30, 3, 8);
        let mut params = mlp_params(3, 4, 2, 2, 9);
        let base = nll(&params, &ds).unwrap();
        let mse = (base - 0.5 * LN_TAU) * 2.0; // mean squared residual at sigma 1
        params.sigma_r = 2.0;
        let doubled = nll(&params, &ds).unwrap();
        let expected = 0.5 * (LN_TAU + 4.0_f64.ln()) + mse / (2.0 * 4.0);
        assert_abs_diff_eq!(doubled, expected, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_mlp() {
        let ds = small_dataset(2, 8, 3, 10);
        let params = mlp_params(3, 4, 3, 2, 11);
        let (_, grad) = nll_and_grad_flat(&params, &ds).unwrap();
        let flat = flatten_params(&params);
        let fd = finite_diff_grad(
            |v| {
                let p = unflatten_params(&params, v);
                nll(&p, &ds).unwrap()
            },
            &flat,
            1e-5,
        )
        .unwrap();
        for i in 0..flat.len() {
            let denom = grad[i].abs().max(fd[i].abs()).max(1e-8);
            let rel = (grad[i] - fd[i]).abs() / denom;
            assert!(rel <= 1e-4, "coordinate {i}: analytic {} vs fd {}", grad[i], fd[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_linear() {
        let ds = small_dataset(3, 10, 4, 12);
        let mut rng = SeededRng::new(13);
        let params = MtrnParams {
            extractor: Extractor::Linear { weight: DMatrix::from_fn(2, 4, |_, _| rng.normal()) },
            heads: DMatrix::from_fn(3, 2, |_, _| rng.normal()),
            sigma_r: 1.0,
        };
        let (_, grad) = nll_and_grad_flat(&params, &ds).unwrap();
        let flat = flatten_params(&params);
        let fd = finite_diff_grad(
            |v| nll(&unflatten_params(&params, v), &ds).unwrap(),
            &flat,
            1e-5,
        )
        .unwrap();
        for i in 0..flat.len() {
            let denom = grad[i].abs().max(fd[i].abs()).max(1e-8);
            assert!((grad[i] - fd[i]).abs() / denom <= 1e-4);
        }
    }

    #[test]
    fn loss_invariant_under_linear_reparameterization() {
        let ds = small_dataset(3, 12, 4, 14);
        let mut rng = SeededRng::new(15);
        let weight = DMatrix::from_fn(3, 4, |_, _| rng.normal());
        let heads = DMatrix::from_fn(3, 3, |_, _| rng.normal());
        let params = MtrnParams {
            extractor: Extractor::Linear { weight: weight.clone() },
            heads: heads.clone(),
            sigma_r: 1.0,
        };
        let a = DMatrix::from_fn(3, 3, |_, _| rng.normal()) + DMatrix::identity(3, 3) * 2.0;
        let a_inv = a.clone().try_inverse().unwrap();
        let reparam = MtrnParams {
            extractor: Extractor::Linear { weight: &a * &weight },
            heads: &heads * &a_inv,
            sigma_r: 1.0,
        };
        let l0 = nll(&params, &ds).unwrap();
        let l1 = nll(&reparam, &ds).unwrap();
        assert_abs_diff_eq!(l0, l1, epsilon = 1e-10);
    }

    #[test]
    fn head_rank_diagnostics() {
        let params = MtrnParams {
            extractor: Extractor::Identity { dim: 3 },
            heads: DMatrix::identity(3, 3),
            sigma_r: 1.0,
        };
        assert_eq!(check_head_rank(&params).rank, 3);
        let dup = MtrnParams {
            extractor: Extractor::Identity { dim: 3 },
            heads: DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 0.0, 1.0, 0.0]),
            sigma_r: 1.0,
        };
        assert!(check_head_rank(&dup).rank <= 2);
    }

    #[test]
    fn generated_truth_heads_have_full_rank() {
        let cfg = GenConfig {
            latent_dim: 5,
            n_causal: 2,
            n_tasks: 200,
            n_per_task: 2,
            obs_dim: 5,
            mixing: MixingKind::Identity,
            mlp_hidden: None,
            sigma_s: 0.1,
            sigma_o: 0.01,
            seed: 16,
        };
        let (_, truths, _) = datagen::generate_dataset(&cfg).unwrap();
        let w_star = DMatrix::from_fn(200, 5, |t, j| truths[t].w_star[j]);
        assert_eq!(rank_diagnostics(&w_star).rank, 5);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset(2, 40, 3, 17);
        let cfg = TrainConfig { max_epochs: 5, patience: 5, ..TrainConfig::default() };
        let spec = ExtractorSpec::Mlp { latent_dim: 2, hidden: Some(4) };
        let (a, _) = train(&ds, &spec, &cfg).unwrap();
        let (b, _) = train(&ds, &spec, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_training_loss_decreases() {
        // Default synthetic scale: 200 tasks of 100 points, lr 1e-3.
        let cfg = GenConfig {
            latent_dim: 3,
            n_causal: 2,
            n_tasks: 200,
            n_per_task: 100,
            obs_dim: 3,
            mixing: MixingKind::RandomLinear,
            mlp_hidden: None,
            sigma_s: 0.1,
            sigma_o: 0.01,
            seed: 18,
        };
        let (ds, _, _) = datagen::generate_dataset(&cfg).unwrap();
        let tc = TrainConfig { max_epochs: 6, patience: 6, ..TrainConfig::default() };
        let (_, trace) = train(&ds, &ExtractorSpec::Linear { latent_dim: 3 }, &tc).unwrap();
        for w in trace.epochs.windows(2) {
            assert!(
                w[1].train_loss < w[0].train_loss,
                "loss did not decrease: {} -> {}",
                w[0].train_loss,
                w[1].train_loss
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = mlp_params(3, 4, 2, 3, 19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mtrn.json");
        let meta = ArtifactMeta {
            seed: 7,
            config_hash: "deadbeef".into(),
            code_version: "test".into(),
        };
        save_checkpoint(&params, &TrainConfig::default(), 1.25, &meta, &path).unwrap();
        let (back, ckpt) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(ckpt.meta.seed, 7);
        assert_eq!(ckpt.final_loss, 1.25);
    }
}
