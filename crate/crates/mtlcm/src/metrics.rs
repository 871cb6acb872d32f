//! Identifiability evaluation.
//!
//! Strong MCC measures recovery up to permutation and per-coordinate
//! scaling: the mean absolute Pearson correlation along the optimal
//! one-to-one assignment between recovered and reference dimensions.
//! Weak MCC measures recovery up to an invertible linear map: both sides
//! are projected onto their canonical-correlation bases first, which makes
//! the score invariant to invertible transforms of either input.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtlcm::VariabilityReport;

/// Pearson correlation matrix between the columns of `z1` and `z2`.
///
/// Rows must match; constant columns contribute zero correlation (with a
/// logged warning) so degenerate models score poorly instead of crashing.
pub fn corr_matrix(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z1.nrows() != z2.nrows() {
        return Err(Error::Dim(format!(
            "corr_matrix: {} vs {} rows",
            z1.nrows(),
            z2.nrows()
        )));
    }
    if z1.nrows() < 2 {
        return Err(Error::Dim("corr_matrix needs at least 2 rows".into()));
    }
    let a = centered_with_norms(z1, "first");
    let b = centered_with_norms(z2, "second");
    let mut out = DMatrix::zeros(z1.ncols(), z2.ncols());
    for i in 0..z1.ncols() {
        if a.norms[i] == 0.0 {
            continue;
        }
        for j in 0..z2.ncols() {
            if b.norms[j] == 0.0 {
                continue;
            }
            out[(i, j)] = a.centered.column(i).dot(&b.centered.column(j)) / (a.norms[i] * b.norms[j]);
        }
    }
    Ok(out)
}

struct Centered {
    centered: DMatrix<f64>,
    norms: Vec<f64>,
}

fn centered_with_norms(z: &DMatrix<f64>, which: &str) -> Centered {
    let n = z.nrows() as f64;
    let mut centered = z.clone();
    let mut norms = vec![0.0; z.ncols()];
    for j in 0..z.ncols() {
        let mean = z.column(j).sum() / n;
        let mut col = centered.column_mut(j);
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        // Column is constant up to rounding noise: define its correlations
        // as zero rather than dividing by ~0.
        if norm <= 1e-12 * n.sqrt() * (mean.abs() + 1.0) {
            log::warn!("corr_matrix: {which} input column {j} is constant; correlations set to 0");
            norms[j] = 0.0;
        } else {
            norms[j] = norm;
        }
    }
    Centered { centered, norms }
}

/// Minimum-cost assignment for a square cost matrix.
///
/// Returns `perm` with `perm[row] = column`. Among all optimal assignments
/// the lexicographically smallest permutation is returned (ties detected at
/// 1e-12 relative tolerance on the total cost).
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(Error::Dim(format!(
            "hungarian requires a non-empty square matrix, got {}x{}",
            n,
            cost.ncols()
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hungarian: cost matrix has non-finite entries".into()));
    }
    let base = kuhn_munkres(cost);
    let optimal: f64 = base.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    let tol = 1e-12 * optimal.abs().max(1.0);

    // Lexicographic refinement: for each row in order, commit to the
    // smallest column that still admits an optimal completion.
    let mut used = vec![false; n];
    let mut perm = vec![0usize; n];
    let mut prefix = 0.0;
    for i in 0..n {
        let mut chosen = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let rest = if i + 1 == n {
                0.0
            } else {
                let sub = submatrix_excluding(cost, i, &used, j);
                let sub_perm = kuhn_munkres(&sub);
                sub_perm.iter().enumerate().map(|(r, &c)| sub[(r, c)]).sum()
            };
            if prefix + cost[(i, j)] + rest <= optimal + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("some optimal completion always exists");
        perm[i] = j;
        used[j] = true;
        prefix += cost[(i, j)];
    }
    Ok(perm)
}

/// Rows `row+1..` by the unused columns (skipping `extra_col`).
fn submatrix_excluding(
    cost: &DMatrix<f64>,
    row: usize,
    used: &[bool],
    extra_col: usize,
) -> DMatrix<f64> {
    let n = cost.nrows();
    let cols: Vec<usize> = (0..n).filter(|&j| !used[j] && j != extra_col).collect();
    let rows: Vec<usize> = ((row + 1)..n).collect();
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| cost[(rows[r], cols[c])])
}

/// Standard O(n^3) Hungarian algorithm with potentials (minimization).
fn kuhn_munkres(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

/// Strong MCC: mean absolute correlation along the optimal assignment.
///
/// Returns the score together with the assignment (`assignment[i]` is the
/// reference dimension matched to recovered dimension `i`).
pub fn mcc_strong(z_rec: &DMatrix<f64>, z_ref: &DMatrix<f64>) -> Result<(f64, Vec<usize>)> {
    if z_rec.ncols() != z_ref.ncols() {
        return Err(Error::Dim(format!(
            "mcc_strong: {} vs {} columns",
            z_rec.ncols(),
            z_ref.ncols()
        )));
    }
    let corr = corr_matrix(z_rec, z_ref)?;
    let neg_abs = corr.map(|v| -v.abs());
    let assignment = hungarian(&neg_abs)?;
    let score = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| corr[(i, j)].abs())
        .sum::<f64>()
        / corr.nrows() as f64;
    Ok((score, assignment))
}

/// Per-dimension absolute correlations along an assignment.
pub fn correlations_along(
    z_rec: &DMatrix<f64>,
    z_ref: &DMatrix<f64>,
    assignment: &[usize],
) -> Result<Vec<f64>> {
    let corr = corr_matrix(z_rec, z_ref)?;
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| corr[(i, j)].abs())
        .collect())
}

/// Weak MCC: canonical correlation alignment followed by strong MCC.
///
/// Both views are centered, whitened with a 1e-8 ridge, and rotated onto
/// their canonical bases; the strong MCC of the aligned variates equals the
/// mean canonical correlation and is invariant under invertible linear maps
/// of either input.
pub fn mcc_weak(h: &DMatrix<f64>, z_ref: &DMatrix<f64>) -> Result<f64> {
    let d = h.ncols();
    if z_ref.ncols() != d {
        return Err(Error::Dim(format!(
            "mcc_weak: {} vs {} columns",
            d,
            z_ref.ncols()
        )));
    }
    if h.nrows() != z_ref.nrows() {
        return Err(Error::Dim("mcc_weak: row counts differ".into()));
    }
    if h.nrows() <= d {
        return Err(Error::Dim(format!(
            "mcc_weak needs more rows ({}) than columns ({d})",
            h.nrows()
        )));
    }
    const RIDGE: f64 = 1e-8;
    let hc = center_columns(h);
    let zc = center_columns(z_ref);
    let n1 = (h.nrows() - 1) as f64;
    let c_hh = hc.transpose() * &hc / n1 + DMatrix::identity(d, d) * RIDGE;
    let c_zz = zc.transpose() * &zc / n1 + DMatrix::identity(d, d) * RIDGE;
    let c_hz = hc.transpose() * &zc / n1;
    let w_h = inverse_sqrt(&c_hh)?;
    let w_z = inverse_sqrt(&c_zz)?;
    let k = &w_h * c_hz * &w_z;
    let svd = k.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let p = &hc * &w_h * u;
    let q = &zc * &w_z * vt.transpose();
    Ok(mcc_strong(&p, &q)?.0)
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / n;
        out.column_mut(j).add_scalar_mut(-mean);
    }
    out
}

/// Symmetric inverse square root via eigendecomposition.
fn inverse_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        return Err(Error::Numerical(
            "covariance rank-deficient beyond the 1e-8 ridge".into(),
        ));
    }
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        eig.eigenvectors[(i, j)] / eig.eigenvalues[j].sqrt()
    });
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Mean and population standard deviation of strong MCC over all unordered
/// pairs of the given latent matrices (the protocol for real data, where
/// ground truth is unknown).
pub fn mcc_pairwise(latents: &[DMatrix<f64>]) -> Result<(f64, f64)> {
    if latents.len() < 2 {
        return Err(Error::Dim("mcc_pairwise needs at least two matrices".into()));
    }
    let shape = latents[0].shape();
    if latents.iter().any(|m| m.shape() != shape) {
        return Err(Error::Dim("mcc_pairwise: matrices must share shape".into()));
    }
    let mut scores = Vec::new();
    for i in 0..latents.len() {
        for j in (i + 1)..latents.len() {
            scores.push(mcc_strong(&latents[i], &latents[j])?.0);
        }
    }
    let m = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / m;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / m;
    Ok((mean, var.sqrt()))
}

/// Fraction of equal entries between two binary indicator matrices.
pub fn indicator_accuracy(learned: &DMatrix<bool>, truth: &DMatrix<bool>) -> Result<f64> {
    if learned.shape() != truth.shape() {
        return Err(Error::Dim(format!(
            "indicator_accuracy: {:?} vs {:?}",
            learned.shape(),
            truth.shape()
        )));
    }
    let total = learned.len() as f64;
    let equal = learned
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a == b)
        .count() as f64;
    Ok(equal / total)
}

/// Per-run evaluation report, serialized as `report_{seed}.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub data: DataSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_mcc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_mcc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicator_accuracy: Option<f64>,
    pub per_dimension_correlations: Vec<f64>,
    pub assignment: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variability: Option<VariabilityReport>,
    pub mtrn: StageOneSummary,
    pub mtlcm: StageTwoSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub kind: String,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub n_tasks: usize,
    pub n_per_task: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_causal: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOneSummary {
    /// "identity", "linear" or "mlp".
    pub arch: String,
    pub final_train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_val_loss: Option<f64>,
    pub epochs: usize,
    pub head_rank: usize,
    pub head_condition: f64,
    /// Whether observation columns were standardized before training.
    #[serde(default)]
    pub x_standardized: bool,
    /// Training configuration actually used, recorded for auditability.
    pub config: crate::mtrn::TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    pub trace: crate::mtrn::TrainingTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTwoSummary {
    pub final_objective: f64,
    pub steps: usize,
    pub a_condition: f64,
    pub sigma_s: f64,
    pub sigma_o: f64,
    /// Whether feature columns were standardized before training.
    #[serde(default)]
    pub h_standardized: bool,
    pub config: crate::mtrn::TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    pub trace: crate::mtlcm::TrainingTrace,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One `results.csv` row. Column order is fixed by the struct field order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsRow {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub data_kind: String,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub n_tasks: usize,
    pub n_per_task: usize,
    pub n_causal: String,
    pub mixing: String,
    pub weak_mcc: String,
    pub strong_mcc: String,
    pub indicator_accuracy: String,
    pub variability_invertible: String,
    pub mtrn_final_loss: String,
    pub mtlcm_objective: String,
    pub pairwise_mcc_mean: String,
    pub pairwise_mcc_std: String,
    pub mtrn_checkpoint_sha256: String,
    pub mtlcm_checkpoint_sha256: String,
}

/// Appends a row to `results.csv`, writing the header when creating it.
pub fn append_results_row(path: &Path, row: &ResultsRow) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    writer.serialize(row)?;
    writer.flush()?;
    Ok(())
}
