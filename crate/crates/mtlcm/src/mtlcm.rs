//! Stage 2: multi-task linear causal model.
//!
//! Stage 1 leaves the latents identified only up to an invertible linear
//! map: `h = A* z`. This module models `h` with a linear Gaussian
//! likelihood `p(h | z) = N(h | A z, sigma_o^2 I)` over a conditionally
//! factorized prior whose mean and variance are determined per task by
//! learnable causal indicators `c_t` and spurious coefficients `gamma_t`:
//!
//! ```text
//! a_t      = y * gamma_t o (1 - c_t)
//! Lambda_t = diag(sigma_s^2 (1 - c_t) + c_t)
//! ```
//!
//! Both distributions are Gaussian, so the latents integrate out in closed
//! form: `p(h | y, t) = N(h | y A (gamma_t o (1 - c_t)),
//! A Lambda_t A^T + sigma_o^2 I)`. Training maximizes this exact marginal
//! likelihood over `A` and the task variables jointly; latents are then
//! recovered as `z = A^{-1} h`, which needs no target values at inference
//! time. Under sufficient task variability (see [`variability_check`]) the
//! recovered latents match the ground truth up to permutation and scaling.
//!
//! Indicators are relaxed to `sigmoid(logits)` during training and only
//! thresholded for reporting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureData;
use crate::error::{Error, Result};
use crate::mtrn::{blob_to_matrix, tensor_blob, TensorBlob, TrainConfig};
use crate::numerics::{
    cholesky_auto, inverse_from_cholesky, solve_lower_matrix, solve_lower_transpose_matrix,
    PsdMatrix, SeededRng,
};
use crate::opt::Adam;
use crate::ArtifactMeta;

pub const MTLCM_FORMAT_VERSION: u32 = 1;

const LN_TAU: f64 = 1.8378770664093453;

/// Logit magnitude that makes `sigmoid` saturate exactly in f64.
const HARD_LOGIT: f64 = 40.0;

/// Stage-2 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlcmParams {
    /// Mixing estimate, `d x d`.
    pub a: DMatrix<f64>,
    /// Causal indicator logits, `n_tasks x d`; `sigmoid` gives the soft
    /// indicators.
    pub c_logits: DMatrix<f64>,
    /// Spurious coefficients, `n_tasks x d`.
    pub gamma: DMatrix<f64>,
    /// Fixed spurious noise scale.
    pub sigma_s: f64,
    /// Fixed observation noise scale.
    pub sigma_o: f64,
}

impl MtlcmParams {
    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.c_logits.nrows()
    }

    /// Soft indicators for task `t`.
    pub fn soft_indicators(&self, t: usize) -> DVector<f64> {
        DVector::from_fn(self.latent_dim(), |j, _| sigmoid(self.c_logits[(t, j)]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and diagonal covariance of the conditional prior `p(z | y, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMoments {
    pub a: DVector<f64>,
    pub lambda_diag: DVector<f64>,
}

/// Natural parameters of the conditional prior:
/// `eta = [Lambda^{-1} a ; -diag(Lambda)/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub eta: DVector<f64>,
}

impl NaturalParams {
    pub fn from_moments(moments: &PriorMoments) -> NaturalParams {
        let d = moments.a.len();
        let mut eta = DVector::zeros(2 * d);
        for j in 0..d {
            debug_assert!(moments.lambda_diag[j] > 0.0, "prior variance must be positive");
            eta[j] = moments.a[j] / moments.lambda_diag[j];
            eta[d + j] = -0.5 * moments.lambda_diag[j];
        }
        NaturalParams { eta }
    }
}

/// Conditional prior moments for task `t` at target value `y`. With
/// `hard`, indicators are thresholded at 0.5 (ties count as causal).
pub fn prior_moments(params: &MtlcmParams, t: usize, y: f64, hard: bool) -> PriorMoments {
    let d = params.latent_dim();
    let mut a = DVector::zeros(d);
    let mut lambda = DVector::zeros(d);
    let s2 = params.sigma_s * params.sigma_s;
    for j in 0..d {
        let mut c = sigmoid(params.c_logits[(t, j)]);
        if hard {
            c = if c >= 0.5 { 1.0 } else { 0.0 };
        }
        a[j] = y * params.gamma[(t, j)] * (1.0 - c);
        lambda[j] = s2 * (1.0 - c) + c;
    }
    PriorMoments { a, lambda_diag: lambda }
}

/// Builds the prior moments directly from known task variables (used for
/// ground-truth diagnostics).
pub fn moments_from_task_vars(
    c: &[bool],
    gamma: &DVector<f64>,
    sigma_s: f64,
    y: f64,
) -> PriorMoments {
    let d = c.len();
    let s2 = sigma_s * sigma_s;
    let mut a = DVector::zeros(d);
    let mut lambda = DVector::zeros(d);
    for j in 0..d {
        if c[j] {
            lambda[j] = 1.0;
        } else {
            a[j] = y * gamma[j];
            lambda[j] = s2;
        }
    }
    PriorMoments { a, lambda_diag: lambda }
}

/// Closed-form marginal log-likelihood `log N(h | mu_t, Sigma_t)` with
/// `mu_t = y A (gamma_t o (1 - c_t))` and
/// `Sigma_t = A Lambda_t A^T + sigma_o^2 I`.
pub fn marginal_loglik(params: &MtlcmParams, h: &DVector<f64>, y: f64, t: usize) -> Result<f64> {
    let d = params.latent_dim();
    if h.len() != d {
        return Err(Error::Dim(format!(
            "marginal_loglik: h has {} entries, model dimension is {d}",
            h.len()
        )));
    }
    if t >= params.n_tasks() {
        return Err(Error::Dim(format!("task {t} out of range ({})", params.n_tasks())));
    }
    let moments = prior_moments(params, t, 1.0, false);
    let mean = &params.a * moments.a.map(|v| v * y);
    let scaled = scale_columns(&params.a, &moments.lambda_diag);
    let mut sigma = &scaled * params.a.transpose();
    for j in 0..d {
        sigma[(j, j)] += params.sigma_o * params.sigma_o;
    }
    let psd = PsdMatrix::new(sigma)?;
    crate::numerics::gaussian_logpdf(h, &mean, &psd)
}

/// `m * diag(d)` without materializing the diagonal matrix.
fn scale_columns(m: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        out.column_mut(j).scale_mut(diag[j]);
    }
    out
}

/// Mean marginal log-likelihood over every (h, y, t) row.
pub fn objective(params: &MtlcmParams, data: &FeatureData) -> Result<f64> {
    Ok(objective_and_grad(params, data, true)?.0)
}

struct GradBlocks {
    a: DMatrix<f64>,
    c_logits: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

/// Objective together with its analytic gradient (skipped when
/// `value_only`). One Cholesky factorization per task per call.
fn objective_and_grad(
    params: &MtlcmParams,
    data: &FeatureData,
    value_only: bool,
) -> Result<(f64, GradBlocks)> {
    let d = params.latent_dim();
    if data.n_tasks() != params.n_tasks() {
        return Err(Error::Dim(format!(
            "objective: data has {} tasks, model {}",
            data.n_tasks(),
            params.n_tasks()
        )));
    }
    if data.latent_dim() != d {
        return Err(Error::Dim(format!(
            "objective: features have dim {}, model {d}",
            data.latent_dim()
        )));
    }
    let n_total = data.n_rows_total() as f64;
    let s2 = params.sigma_s * params.sigma_s;
    let o2 = params.sigma_o * params.sigma_o;

    let mut total = 0.0;
    let mut grad = GradBlocks {
        a: DMatrix::zeros(d, d),
        c_logits: DMatrix::zeros(params.n_tasks(), d),
        gamma: DMatrix::zeros(params.n_tasks(), d),
    };

    for t in 0..data.n_tasks() {
        let h = data.h_for(t);
        let y = &data.tasks[t].y;
        let n_t = y.len();
        let c_soft = params.soft_indicators(t);
        let gamma_t = params.gamma.row(t).transpose();
        let m: DVector<f64> = gamma_t.component_mul(&c_soft.map(|c| 1.0 - c));
        let lambda: DVector<f64> = c_soft.map(|c| s2 * (1.0 - c) + c);
        let am = &params.a * &m;

        let scaled = scale_columns(&params.a, &lambda);
        let mut sigma = &scaled * params.a.transpose();
        for j in 0..d {
            sigma[(j, j)] += o2;
        }
        let (l, _) = cholesky_auto(&PsdMatrix::new(sigma)?)
            .map_err(|e| Error::Numerical(format!("task {t}: {e}")))?;
        let log_det_half: f64 = (0..d).map(|j| l[(j, j)].ln()).sum();

        // Residual rows r_i = h_i - y_i * (A m), laid out d x n.
        let mut r = DMatrix::zeros(d, n_t);
        for i in 0..n_t {
            for j in 0..d {
                r[(j, i)] = h[(i, j)] - y[i] * am[j];
            }
        }
        let v = solve_lower_matrix(&l, &r);
        let quad_sum = v.iter().map(|x| x * x).sum::<f64>();
        total += n_t as f64 * (-0.5 * d as f64 * LN_TAU - log_det_half) - 0.5 * quad_sum;

        if value_only {
            continue;
        }

        // alpha_i = Sigma^{-1} r_i.
        let alpha = solve_lower_transpose_matrix(&l, &v);
        let s_y_alpha = &alpha * y;
        let sigma_inv = inverse_from_cholesky(&l);
        let g_sigma = (&alpha * alpha.transpose() - sigma_inv * n_t as f64) * 0.5;

        // dA: mean path + covariance path.
        grad.a += &s_y_alpha * m.transpose() + 2.0 * &g_sigma * scaled;

        let g_m = params.a.transpose() * &s_y_alpha;
        let atga = params.a.transpose() * &g_sigma * &params.a;
        for j in 0..d {
            let g_lambda = atga[(j, j)];
            let c = c_soft[j];
            grad.gamma[(t, j)] = g_m[j] * (1.0 - c);
            let g_c = -g_m[j] * gamma_t[j] + g_lambda * (1.0 - s2);
            grad.c_logits[(t, j)] = g_c * c * (1.0 - c);
        }
    }

    let value = total / n_total;
    if !value_only {
        grad.a /= n_total;
        grad.c_logits /= n_total;
        grad.gamma /= n_total;
    }
    Ok((value, grad))
}

/// Flat-layout objective gradient `[a, c_logits, gamma]` (column-major per
/// tensor), used by the finite-difference checks.
pub fn objective_and_grad_flat(
    params: &MtlcmParams,
    data: &FeatureData,
) -> Result<(f64, DVector<f64>)> {
    let (value, grad) = objective_and_grad(params, data, false)?;
    let mut flat = Vec::with_capacity(grad.a.len() + grad.c_logits.len() + grad.gamma.len());
    flat.extend_from_slice(grad.a.as_slice());
    flat.extend_from_slice(grad.c_logits.as_slice());
    flat.extend_from_slice(grad.gamma.as_slice());
    Ok((value, DVector::from_vec(flat)))
}

pub fn flatten_params(params: &MtlcmParams) -> DVector<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(params.a.as_slice());
    out.extend_from_slice(params.c_logits.as_slice());
    out.extend_from_slice(params.gamma.as_slice());
    DVector::from_vec(out)
}

pub fn unflatten_params(like: &MtlcmParams, flat: &DVector<f64>) -> MtlcmParams {
    let d = like.latent_dim();
    let t = like.n_tasks();
    let s = flat.as_slice();
    MtlcmParams {
        a: DMatrix::from_column_slice(d, d, &s[..d * d]),
        c_logits: DMatrix::from_column_slice(t, d, &s[d * d..d * d + t * d]),
        gamma: DMatrix::from_column_slice(t, d, &s[d * d + t * d..]),
        sigma_s: like.sigma_s,
        sigma_o: like.sigma_o,
    }
}

/// Recovered latents `z` solving `A z = h` (LU solve; no explicit inverse).
pub fn recover_latents(params: &MtlcmParams, h: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = params.a.clone().lu();
    lu.solve(h)
        .ok_or_else(|| Error::Numerical("recover_latents: A is singular".into()))
}

/// Recovers latents for every row of `h` (`n x d` -> `n x d`).
pub fn recover_all(params: &MtlcmParams, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = params.a.clone().lu();
    let solved = lu
        .solve(&h.transpose())
        .ok_or_else(|| Error::Numerical("recover_all: A is singular".into()))?;
    Ok(solved.transpose())
}

/// Hard indicators: `sigmoid(logits) >= threshold`.
pub fn indicators(params: &MtlcmParams, threshold: f64) -> DMatrix<bool> {
    DMatrix::from_fn(params.n_tasks(), params.latent_dim(), |t, j| {
        sigmoid(params.c_logits[(t, j)]) >= threshold
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_mcc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_condition: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub steps: Vec<StepRecord>,
    /// Optimization steps actually executed (the records above may be
    /// sparse).
    #[serde(default)]
    pub steps_ran: usize,
}

/// Ground-truth task variables to hold fixed during an ablation run.
#[derive(Debug, Clone)]
pub struct FixedTaskVars {
    pub c: DMatrix<bool>,
    pub gamma: DMatrix<f64>,
}

/// Reference latents for tracking recovery quality along the trace:
/// `h` rows and `z_ref` rows aligned.
#[derive(Debug, Clone)]
pub struct MccProbe {
    pub h: DMatrix<f64>,
    pub z_ref: DMatrix<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Train only `A`, holding the task variables at the given values.
    pub fixed_task_vars: Option<FixedTaskVars>,
    /// Record strong MCC against these references every `trace_every` steps.
    pub mcc_probe: Option<MccProbe>,
    /// Trace interval in steps (0 disables intermediate records).
    pub trace_every: usize,
}

/// `A` condition number above which training aborts.
const MAX_A_CONDITION: f64 = 1e10;

/// Maximizes the mean marginal log-likelihood by full-batch Adam.
///
/// `A` starts at identity plus 0.01-scaled Gaussian noise, indicator logits
/// at zero (soft value 0.5) and spurious coefficients at zero. Soft
/// indicators are used throughout; threshold only for reporting.
pub fn train(
    data: &FeatureData,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(MtlcmParams, TrainingTrace)> {
    train_with_sigmas(data, cfg, opts, 0.1, 0.01)
}

/// [`train`] with explicit noise scales.
pub fn train_with_sigmas(
    data: &FeatureData,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    sigma_s: f64,
    sigma_o: f64,
) -> Result<(MtlcmParams, TrainingTrace)> {
    cfg.validate()?;
    if data.n_tasks() == 0 {
        return Err(Error::Config("stage-2 training needs at least one task".into()));
    }
    let d = data.latent_dim();
    let n_tasks = data.n_tasks();
    let mut init = SeededRng::new(cfg.seed).fork(0);
    let a = DMatrix::identity(d, d) + DMatrix::from_fn(d, d, |_, _| 0.01 * init.normal());
    let (c_logits, gamma, fix_vars) = match &opts.fixed_task_vars {
        Some(fixed) => {
            if fixed.c.shape() != (n_tasks, d) || fixed.gamma.shape() != (n_tasks, d) {
                return Err(Error::Dim("fixed task variables have wrong shape".into()));
            }
            let logits = fixed.c.map(|c| if c { HARD_LOGIT } else { -HARD_LOGIT });
            (logits, fixed.gamma.clone(), true)
        }
        None => (DMatrix::zeros(n_tasks, d), DMatrix::zeros(n_tasks, d), false),
    };
    let mut params = MtlcmParams { a, c_logits, gamma, sigma_s, sigma_o };

    let sizes = if fix_vars {
        vec![params.a.len()]
    } else {
        vec![params.a.len(), params.c_logits.len(), params.gamma.len()]
    };
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, &sizes);

    let mut trace = TrainingTrace::default();
    let mut best_obj = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut stale = 0usize;
    let mut last_obj = f64::NEG_INFINITY;
    let mut steps_ran = 0usize;
    for step in 0..cfg.max_epochs {
        steps_ran = step + 1;
        let (obj, grads) = objective_and_grad(&params, data, false)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("objective non-finite at step {step}")));
        }
        last_obj = obj;

        let should_trace =
            opts.trace_every > 0 && (step % opts.trace_every == 0 || step + 1 == cfg.max_epochs);
        if should_trace {
            let cond = crate::datagen::condition_number(&params.a);
            if cond > MAX_A_CONDITION {
                return Err(Error::Numerical(format!(
                    "A condition number {cond:.3e} exceeded {MAX_A_CONDITION:.0e} at step {step}"
                )));
            }
            let strong_mcc = match &opts.mcc_probe {
                Some(probe) => {
                    let rec = recover_all(&params, &probe.h)?;
                    Some(crate::metrics::mcc_strong(&rec, &probe.z_ref)?.0)
                }
                None => None,
            };
            trace.steps.push(StepRecord { step, objective: obj, strong_mcc, a_condition: Some(cond) });
        }

        if obj > best_obj + 1e-10 {
            best_obj = obj;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }

        // Ascent: Adam minimizes, so feed negated gradients.
        let neg_a = -&grads.a;
        if fix_vars {
            adam.step(&mut [params.a.as_mut_slice()], &[neg_a.as_slice()]);
        } else {
            let neg_c = -&grads.c_logits;
            let neg_g = -&grads.gamma;
            adam.step(
                &mut [
                    params.a.as_mut_slice(),
                    params.c_logits.as_mut_slice(),
                    params.gamma.as_mut_slice(),
                ],
                &[neg_a.as_slice(), neg_c.as_slice(), neg_g.as_slice()],
            );
        }
    }

    let final_cond = crate::datagen::condition_number(&best_params.a);
    if final_cond > MAX_A_CONDITION {
        return Err(Error::Numerical(format!(
            "final A condition number {final_cond:.3e} exceeds {MAX_A_CONDITION:.0e}"
        )));
    }
    if trace.steps.is_empty() {
        trace.steps.push(StepRecord {
            step: steps_ran.saturating_sub(1),
            objective: last_obj,
            strong_mcc: None,
            a_condition: Some(final_cond),
        });
    }
    trace.steps_ran = steps_ran;
    Ok((best_params, trace))
}

// ---------------------------------------------------------------------------
// Sufficient-variability diagnostic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariabilityReport {
    /// Latent dimension `d`; the natural parameters live in `2d`.
    pub dim: usize,
    pub n_points: usize,
    pub invertible: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `sigma_max / sigma_min`; absent when the matrix is exactly singular.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<f64>,
    /// The assembled difference matrix, not serialized.
    #[serde(skip, default = "empty_matrix")]
    pub l: DMatrix<f64>,
}

fn empty_matrix() -> DMatrix<f64> {
    DMatrix::zeros(0, 0)
}

/// Checks the sufficient-variability condition: whether the natural
/// parameters of the supplied conditioning points span all `2d` directions.
///
/// Builds `eta(u_i) - eta(u_0)` difference columns and greedily selects
/// `2d` of them to keep the smallest singular value as large as practical
/// (residual-norm pivoting); reports invertibility of the selected square
/// matrix at tolerance `sigma_min > 1e-8 * sigma_max`.
pub fn variability_check(points: &[PriorMoments]) -> Result<VariabilityReport> {
    if points.is_empty() {
        return Err(Error::Dim("variability_check: no points supplied".into()));
    }
    let d = points[0].a.len();
    let k = 2 * d;
    if points.len() < k + 1 {
        return Err(Error::Dim(format!(
            "variability_check needs at least {} points for d={d}, got {}",
            k + 1,
            points.len()
        )));
    }
    if points.iter().any(|p| p.a.len() != d || p.lambda_diag.len() != d) {
        return Err(Error::Dim("variability_check: inconsistent point dimensions".into()));
    }
    let etas: Vec<DVector<f64>> = points
        .iter()
        .map(|p| NaturalParams::from_moments(p).eta)
        .collect();
    let candidates: Vec<DVector<f64>> = etas[1..].iter().map(|e| e - &etas[0]).collect();

    // Greedy residual-norm pivoting (modified Gram-Schmidt).
    let mut residuals = candidates.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let (best, best_norm) = residuals
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(i, r)| (i, r.norm()))
            .fold((usize::MAX, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        chosen.push(best);
        if best_norm > 0.0 {
            let q = &residuals[best] / best_norm;
            for (i, r) in residuals.iter_mut().enumerate() {
                if !chosen.contains(&i) {
                    let proj = q.dot(r);
                    *r -= &q * proj;
                }
            }
            basis.push(q);
        }
    }
    let l = DMatrix::from_fn(k, k, |row, col| candidates[chosen[col]][row]);
    let svd = l.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let invertible = sigma_max > 0.0 && sigma_min > 1e-8 * sigma_max;
    let condition = if sigma_min > 0.0 { Some(sigma_max / sigma_min) } else { None };
    Ok(VariabilityReport {
        dim: d,
        n_points: points.len(),
        invertible,
        sigma_min,
        sigma_max,
        condition,
        l,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MtlcmCheckpoint {
    pub format_version: u32,
    pub latent_dim: usize,
    pub n_tasks: usize,
    pub sigma_s: f64,
    pub sigma_o: f64,
    pub tensors: Vec<TensorBlob>,
    pub train_config: TrainConfig,
    pub final_objective: f64,
    pub meta: ArtifactMeta,
}

/// Serializes trained parameters to `mtlcm.json`.
pub fn save_checkpoint(
    params: &MtlcmParams,
    cfg: &TrainConfig,
    final_objective: f64,
    meta: &ArtifactMeta,
    path: &std::path::Path,
) -> Result<()> {
    let ckpt = MtlcmCheckpoint {
        format_version: MTLCM_FORMAT_VERSION,
        latent_dim: params.latent_dim(),
        n_tasks: params.n_tasks(),
        sigma_s: params.sigma_s,
        sigma_o: params.sigma_o,
        tensors: vec![
            tensor_blob("a", &params.a),
            tensor_blob("c_logits", &params.c_logits),
            tensor_blob("gamma", &params.gamma),
        ],
        train_config: cfg.clone(),
        final_objective,
        meta: meta.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// Loads parameters from `mtlcm.json`.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(MtlcmParams, MtlcmCheckpoint)> {
    let ckpt: MtlcmCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ckpt.format_version != MTLCM_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported mtlcm checkpoint version {}",
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
    let params = MtlcmParams {
        a: find("a")?,
        c_logits: find("c_logits")?,
        gamma: find("gamma")?,
        sigma_s: ckpt.sigma_s,
        sigma_o: ckpt.sigma_o,
    };
    Ok((params, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureData, FeatureTask};
    use crate::numerics::{finite_diff_grad, gaussian_logpdf};
    use approx::assert_abs_diff_eq;

    fn params_with(
        a: DMatrix<f64>,
        c_logits: DMatrix<f64>,
        gamma: DMatrix<f64>,
        sigma_s: f64,
        sigma_o: f64,
    ) -> MtlcmParams {
        MtlcmParams { a, c_logits, gamma, sigma_s, sigma_o }
    }

    fn random_params(d: usize, n_tasks: usize, seed: u64) -> MtlcmParams {
        let mut rng = SeededRng::new(seed);
        params_with(
            DMatrix::identity(d, d) + DMatrix::from_fn(d, d, |_, _| 0.3 * rng.normal()),
            DMatrix::from_fn(n_tasks, d, |_, _| rng.normal()),
            DMatrix::from_fn(n_tasks, d, |_, _| rng.normal()),
            0.5,
            0.4,
        )
    }

    fn random_data(params: &MtlcmParams, n_per_task: usize, seed: u64) -> FeatureData {
        let mut rng = SeededRng::new(seed);
        let d = params.latent_dim();
        let tasks = (0..params.n_tasks())
            .map(|_| FeatureTask {
                h: Some(DMatrix::from_fn(n_per_task, d, |_, _| rng.normal())),
                y: DVector::from_fn(n_per_task, |_, _| rng.normal()),
            })
            .collect();
        FeatureData { tasks, shared_h: None }
    }

    #[test]
    fn prior_moments_all_causal() {
        let p = params_with(
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 2, HARD_LOGIT),
            DMatrix::from_element(1, 2, 0.7),
            0.1,
            0.01,
        );
        let m = prior_moments(&p, 0, 3.0, false);
        assert_eq!(m.a, DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(m.lambda_diag, DVector::from_vec(vec![1.0, 1.0]));
    }

    #[test]
    fn prior_moments_all_spurious() {
        let p = params_with(
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 2, -HARD_LOGIT),
            DMatrix::from_row_slice(1, 2, &[0.3, -0.8]),
            0.1,
            0.01,
        );
        let y = 2.0;
        let m = prior_moments(&p, 0, y, false);
        assert_abs_diff_eq!(m.a[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(m.a[1], -1.6, epsilon = 1e-15);
        assert_abs_diff_eq!(m.lambda_diag[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(m.lambda_diag[1], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn prior_moments_mixed_case() {
        // d=2, c=(1,0), gamma=(_, 0.5), y=2, sigma_s=0.1:
        // a = (0, 1), Lambda = diag(1, 0.01).
        let p = params_with(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[HARD_LOGIT, -HARD_LOGIT]),
            DMatrix::from_row_slice(1, 2, &[0.9, 0.5]),
            0.1,
            0.01,
        );
        let m = prior_moments(&p, 0, 2.0, false);
        assert_abs_diff_eq!(m.a[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.a[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.lambda_diag[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.lambda_diag[1], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn hard_thresholding_ties_count_as_causal() {
        let p = params_with(
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.7),
            0.1,
            0.01,
        );
        let soft = prior_moments(&p, 0, 1.0, false);
        assert_abs_diff_eq!(soft.lambda_diag[0], 0.5 * 0.01 + 0.5, epsilon = 1e-15);
        let hard = prior_moments(&p, 0, 1.0, true);
        assert_eq!(hard.lambda_diag[0], 1.0);
        assert_eq!(hard.a[0], 0.0);
    }

    #[test]
    fn natural_params_layout() {
        let m = PriorMoments {
            a: DVector::from_vec(vec![0.5, -1.0]),
            lambda_diag: DVector::from_vec(vec![0.25, 1.0]),
        };
        let eta = NaturalParams::from_moments(&m).eta;
        assert_eq!(eta.len(), 4);
        assert_abs_diff_eq!(eta[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eta[1], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eta[2], -0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(eta[3], -0.5, epsilon = 1e-15);
        assert!(eta.rows(2, 2).iter().all(|&v| v < 0.0));
    }

    #[test]
    fn marginal_loglik_1d_closed_form() {
        // d=1, causal, A=[1]: mu = 0, variance = 1 + sigma_o^2.
        let sigma_o = 0.3;
        let p = params_with(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, HARD_LOGIT),
            DMatrix::zeros(1, 1),
            0.1,
            sigma_o,
        );
        let h = 0.8;
        let var = 1.0 + sigma_o * sigma_o;
        let expected = -0.5 * (LN_TAU + var.ln() + h * h / var);
        let got = marginal_loglik(&p, &DVector::from_element(1, h), 2.5, 0).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    /// Monte-Carlo marginalization oracle: draws z from the conditional
    /// prior and averages the likelihood, fully independent of the
    /// closed-form path.
    fn mc_marginal_loglik(
        params: &MtlcmParams,
        h: &DVector<f64>,
        y: f64,
        t: usize,
        samples: usize,
        rng: &mut SeededRng,
    ) -> f64 {
        let d = params.latent_dim();
        let moments = prior_moments(params, t, y, false);
        let o2 = params.sigma_o * params.sigma_o;
        let mut lls = Vec::with_capacity(samples);
        for _ in 0..samples {
            let z = DVector::from_fn(d, |j, _| {
                moments.a[j] + moments.lambda_diag[j].sqrt() * rng.normal()
            });
            let mean = &params.a * z;
            let mut ll = 0.0;
            for j in 0..d {
                let r = h[j] - mean[j];
                ll += -0.5 * (LN_TAU + o2.ln() + r * r / o2);
            }
            lls.push(ll);
        }
        let max = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = lls.iter().map(|l| (l - max).exp()).sum();
        max + (sum_exp / samples as f64).ln()
    }

    #[test]
    fn marginal_matches_monte_carlo_oracle_d2() {
        let mut rng = SeededRng::new(404);
        let p = params_with(
            DMatrix::identity(2, 2) + DMatrix::from_fn(2, 2, |_, _| 0.3 * rng.normal()),
            DMatrix::from_fn(1, 2, |_, _| rng.normal()),
            DMatrix::from_fn(1, 2, |_, _| rng.normal()),
            0.8,
            0.5,
        );
        let h = DVector::from_fn(2, |_, _| rng.normal());
        let y = rng.normal();
        let exact = marginal_loglik(&p, &h, y, 0).unwrap();
        let mc = mc_marginal_loglik(&p, &h, y, 0, 1_000_000, &mut rng);
        assert!((exact - mc).abs() < 1e-2, "exact {exact} vs mc {mc}");
    }

    #[test]
    fn marginal_is_permutation_equivariant() {
        let mut rng = SeededRng::new(505);
        let d = 4;
        let p = random_params(d, 2, 506);
        let h = DVector::from_fn(d, |_, _| rng.normal());
        let y = 0.7;
        let base = marginal_loglik(&p, &h, y, 1).unwrap();
        // Permutation 0->2, 1->0, 2->3, 3->1 as a matrix.
        let perm = [2usize, 0, 3, 1];
        let mut pm = DMatrix::<f64>::zeros(d, d);
        for (i, &pi) in perm.iter().enumerate() {
            pm[(i, pi)] = 1.0;
        }
        // (A P, P^T c, P^T gamma) leaves the marginal unchanged.
        let permuted = params_with(
            &p.a * &pm,
            permute_cols_rowwise(&p.c_logits, &pm),
            permute_cols_rowwise(&p.gamma, &pm),
            p.sigma_s,
            p.sigma_o,
        );
        let got = marginal_loglik(&permuted, &h, y, 1).unwrap();
        assert_abs_diff_eq!(base, got, epsilon = 1e-10);
    }

    fn permute_cols_rowwise(m: &DMatrix<f64>, perm: &DMatrix<f64>) -> DMatrix<f64> {
        // rows are per-task vectors v; the transformed vector is P^T v.
        m * perm
    }

    #[test]
    fn prior_factorizes_over_coordinates() {
        // Diagonal covariance: joint density equals the product of the
        // univariate marginals on a grid.
        let p = random_params(3, 1, 42);
        let moments = prior_moments(&p, 0, 1.3, false);
        let cov = PsdMatrix::new(DMatrix::from_diagonal(&moments.lambda_diag)).unwrap();
        for gx in -2..=2 {
            for gy in -2..=2 {
                for gz in -2..=2 {
                    let z = DVector::from_vec(vec![gx as f64 * 0.5, gy as f64 * 0.5, gz as f64 * 0.5]);
                    let joint = gaussian_logpdf(&z, &moments.a, &cov).unwrap();
                    let mut product = 0.0;
                    for j in 0..3 {
                        let var = moments.lambda_diag[j];
                        let r = z[j] - moments.a[j];
                        product += -0.5 * (LN_TAU + var.ln() + r * r / var);
                    }
                    assert_abs_diff_eq!(joint, product, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn objective_of_single_row_equals_marginal() {
        let p = random_params(3, 1, 7);
        let mut rng = SeededRng::new(8);
        let h = DMatrix::from_fn(1, 3, |_, _| rng.normal());
        let y = DVector::from_element(1, 0.4);
        let data = FeatureData {
            tasks: vec![FeatureTask { h: Some(h.clone()), y: y.clone() }],
            shared_h: None,
        };
        let obj = objective(&p, &data).unwrap();
        let single = marginal_loglik(&p, &h.row(0).transpose(), y[0], 0).unwrap();
        assert_abs_diff_eq!(obj, single, epsilon = 1e-12);
    }

    #[test]
    fn objective_is_mean_so_duplication_is_invariant() {
        let p = random_params(2, 2, 9);
        let data = random_data(&p, 5, 10);
        let doubled = FeatureData {
            tasks: data
                .tasks
                .iter()
                .map(|t| {
                    let h = t.h.as_ref().unwrap();
                    let mut h2 = DMatrix::zeros(h.nrows() * 2, h.ncols());
                    h2.rows_mut(0, h.nrows()).copy_from(h);
                    h2.rows_mut(h.nrows(), h.nrows()).copy_from(h);
                    let mut y2 = DVector::zeros(t.y.len() * 2);
                    y2.rows_mut(0, t.y.len()).copy_from(&t.y);
                    y2.rows_mut(t.y.len(), t.y.len()).copy_from(&t.y);
                    FeatureTask { h: Some(h2), y: y2 }
                })
                .collect(),
            shared_h: None,
        };
        let a = objective(&p, &data).unwrap();
        let b = objective(&p, &doubled).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = random_params(3, 2, 11);
        let data = random_data(&p, 4, 12);
        let (_, grad) = objective_and_grad_flat(&p, &data).unwrap();
        let flat = flatten_params(&p);
        let fd = finite_diff_grad(
            |v| objective(&unflatten_params(&p, v), &data).unwrap(),
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
    fn recover_latents_identity_and_scaling() {
        let mut p = random_params(3, 1, 13);
        p.a = DMatrix::identity(3, 3);
        let h = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(recover_latents(&p, &h).unwrap(), h);
        p.a = DMatrix::identity(3, 3) * 2.0;
        assert!((recover_latents(&p, &h).unwrap() - &h / 2.0).norm() < 1e-14);
    }

    #[test]
    fn recover_latents_reconstructs_random_instance() {
        let mut rng = SeededRng::new(14);
        let mut p = random_params(4, 1, 15);
        p.a = DMatrix::from_fn(4, 4, |_, _| rng.normal()) + DMatrix::identity(4, 4) * 2.0;
        let z_true = DVector::from_fn(4, |_, _| rng.normal());
        let h = &p.a * &z_true;
        let z = recover_latents(&p, &h).unwrap();
        assert!((z - &z_true).norm() < 1e-8);
    }

    #[test]
    fn recover_latents_rejects_singular() {
        let mut p = random_params(2, 1, 16);
        p.a = DMatrix::zeros(2, 2);
        assert!(recover_latents(&p, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn indicators_tie_rule_and_signs() {
        let p = params_with(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
            DMatrix::zeros(1, 2),
            0.1,
            0.01,
        );
        let ind = indicators(&p, 0.5);
        assert!(ind.iter().all(|&v| v));
        let p2 = params_with(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[10.0, -10.0]),
            DMatrix::zeros(1, 2),
            0.1,
            0.01,
        );
        let ind2 = indicators(&p2, 0.5);
        assert!(ind2[(0, 0)]);
        assert!(!ind2[(0, 1)]);
    }

    #[test]
    fn variability_of_identical_points_is_singular() {
        let m = PriorMoments {
            a: DVector::from_vec(vec![0.5, 0.1]),
            lambda_diag: DVector::from_vec(vec![0.01, 1.0]),
        };
        let points = vec![m; 6];
        let report = variability_check(&points).unwrap();
        assert!(!report.invertible);
        assert_eq!(report.sigma_max, 0.0);
        assert!(report.condition.is_none());
    }

    #[test]
    fn variability_needs_enough_points() {
        let m = PriorMoments {
            a: DVector::from_vec(vec![0.5]),
            lambda_diag: DVector::from_vec(vec![1.0]),
        };
        assert!(variability_check(&vec![m; 2]).is_err());
    }

    #[test]
    fn variability_d1_hand_check() {
        // d=1, k=2: two tasks with distinct Lambda plus y variation within
        // a task span both natural-parameter directions.
        let spurious = |y: f64| PriorMoments {
            a: DVector::from_element(1, 0.8 * y),
            lambda_diag: DVector::from_element(1, 0.01),
        };
        let causal = PriorMoments {
            a: DVector::from_element(1, 0.0),
            lambda_diag: DVector::from_element(1, 1.0),
        };
        let report = variability_check(&[spurious(0.0), spurious(1.0), causal.clone()]).unwrap();
        assert!(report.invertible, "sigma_min {}", report.sigma_min);
        // All points with the same Lambda and proportional a: singular.
        let bad = variability_check(&[spurious(0.0), spurious(1.0), spurious(2.0)]).unwrap();
        assert!(!bad.invertible);
    }

    /// When every task has the same number of causal coordinates, the
    /// prior-variance entries are permutations of one fixed multiset, so
    /// the last `d` coordinates of every natural-parameter difference sum
    /// to exactly zero: the difference columns share a left null vector
    /// and L can never be invertible. The SVD oracle over all generated
    /// candidate columns pins the rank at exactly `2d - 1`.
    #[test]
    fn constant_causal_count_caps_variability_rank() {
        let cfg = crate::datagen::GenConfig {
            latent_dim: 5,
            n_causal: 2,
            n_tasks: 200,
            n_per_task: 2,
            obs_dim: 5,
            mixing: crate::datagen::MixingKind::Identity,
            mlp_hidden: None,
            sigma_s: 0.1,
            sigma_o: 0.01,
            seed: 21,
        };
        let (_, truths, _) = crate::datagen::generate_dataset(&cfg).unwrap();
        let mut points = Vec::new();
        for truth in &truths {
            for y in [-1.0, 0.0, 1.0] {
                points.push(moments_from_task_vars(&truth.c_star, &truth.gamma_star, cfg.sigma_s, y));
            }
        }
        let report = variability_check(&points).unwrap();
        assert!(!report.invertible);

        // Full-candidate-matrix rank via SVD, independent of the greedy.
        let etas: Vec<DVector<f64>> = points
            .iter()
            .map(|p| NaturalParams::from_moments(p).eta)
            .collect();
        let diffs =
            DMatrix::from_fn(10, etas.len() - 1, |r, c| etas[c + 1][r] - etas[0][r]);
        let svd = diffs.svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        assert_eq!(rank, 9);
    }

    /// With causal counts varying across tasks the degeneracy disappears
    /// and the assembled L becomes invertible.
    #[test]
    fn varying_causal_counts_give_invertible_variability() {
        let d = 5;
        let mut rng = SeededRng::new(33);
        let mut points = Vec::new();
        for k in 0..40 {
            let n_causal = 1 + (k % 4);
            let idx = rng.subset(d, n_causal);
            let mut c = vec![false; d];
            for &j in &idx {
                c[j] = true;
            }
            let gamma = DVector::from_fn(d, |j, _| if c[j] { 0.0 } else { rng.uniform_range(-1.0, 1.0) });
            for y in [-1.0, 0.0, 1.0] {
                points.push(moments_from_task_vars(&c, &gamma, 0.1, y));
            }
        }
        let report = variability_check(&points).unwrap();
        assert!(report.invertible, "sigma_min {} sigma_max {}", report.sigma_min, report.sigma_max);
    }

    #[test]
    fn training_is_deterministic_and_objective_improves() {
        let truth = random_params(2, 3, 17);
        let data = random_data(&truth, 30, 18);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 60,
            patience: 60,
            ..TrainConfig::default()
        };
        let opts = TrainOptions { trace_every: 10, ..TrainOptions::default() };
        let (p1, tr1) = train_with_sigmas(&data, &cfg, &opts, 0.5, 0.4).unwrap();
        let (p2, _) = train_with_sigmas(&data, &cfg, &opts, 0.5, 0.4).unwrap();
        assert_eq!(p1, p2);
        let first = tr1.steps.first().unwrap().objective;
        let last = tr1.steps.last().unwrap().objective;
        assert!(last > first, "objective did not improve: {first} -> {last}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let p = random_params(3, 4, 19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mtlcm.json");
        let meta = ArtifactMeta { seed: 3, config_hash: "ffff".into(), code_version: "test".into() };
        save_checkpoint(&p, &TrainConfig::default(), -1.5, &meta, &path).unwrap();
        let (back, ckpt) = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(ckpt.latent_dim, 3);
        assert_eq!(ckpt.n_tasks, 4);
    }
}
