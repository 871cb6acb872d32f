//! Low-level numerical kernels shared by every other module: seeded
//! randomness, Cholesky factorization with jitter escalation, Gaussian log
//! densities, and a central-difference gradient oracle.
//!
//! All arithmetic is in `f64`; correlation scores near 1.0 and log
//! determinants of near-singular covariances are too precision-sensitive
//! for anything less. Everything here is a pure function of its inputs.

pub mod rng;

pub use rng::SeededRng;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter escalation ladder used by [`cholesky_auto`]: no jitter first, then
/// 1e-10 increasing tenfold up to 1e-6.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// A dense symmetric positive semi-definite matrix.
///
/// Construction checks squareness and symmetry (to 1e-12 relative to the
/// largest entry magnitude); positive definiteness is established lazily by
/// the Cholesky routines, which may add diagonal jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix {
    mat: DMatrix<f64>,
}

impl PsdMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::Dim(format!(
                "PsdMatrix must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let scale = mat.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * scale.max(1e-300);
        for i in 0..mat.nrows() {
            for j in 0..i {
                if (mat[(i, j)] - mat[(j, i)]).abs() > tol {
                    return Err(Error::Numerical(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        mat[(i, j)],
                        mat[(j, i)]
                    )));
                }
            }
        }
        Ok(PsdMatrix { mat })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }
}

/// Lower-triangular Cholesky factor `L` of `cov + jitter * I`, so that
/// `L * L^T` reconstructs the jittered input.
///
/// Fails with a numerical-domain error if any pivot is non-positive.
pub fn cholesky(cov: &PsdMatrix, jitter: f64) -> Result<DMatrix<f64>> {
    let d = cov.dim();
    let a = cov.as_matrix();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut diag = a[(j, j)] + jitter;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Numerical(format!(
                "Cholesky pivot {j} non-positive ({diag:.3e}) for {d}x{d} matrix with jitter {jitter:.1e}"
            )));
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Cholesky with automatic jitter escalation along [`JITTER_LADDER`].
/// Returns the factor together with the jitter that succeeded.
pub fn cholesky_auto(cov: &PsdMatrix) -> Result<(DMatrix<f64>, f64)> {
    let mut last = None;
    for &jitter in JITTER_LADDER.iter() {
        match cholesky(cov, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Numerical(format!(
        "matrix ({dim}x{dim}) not positive definite even with jitter {max:.0e}: {last}",
        dim = cov.dim(),
        max = JITTER_LADDER[JITTER_LADDER.len() - 1],
        last = last.expect("ladder is non-empty"),
    )))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v -= l[(i, k)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Columnwise `L X = B` solve for matrix right-hand sides.
pub fn solve_lower_matrix(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)];
        }
    }
    x
}

/// Columnwise `L^T X = B` solve for matrix right-hand sides.
pub fn solve_lower_transpose_matrix(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut v = x[(i, c)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)];
        }
    }
    x
}

/// Inverse of `L L^T` computed from the factor via triangular solves.
pub fn inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let linv = solve_lower_matrix(l, &eye);
    solve_lower_transpose_matrix(l, &linv)
}

/// Log density of a multivariate Gaussian, evaluated via Cholesky: the log
/// determinant from the pivot logs, the quadratic form from a triangular
/// solve.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &PsdMatrix) -> Result<f64> {
    let d = cov.dim();
    if x.len() != d || mean.len() != d {
        return Err(Error::Dim(format!(
            "gaussian_logpdf: x has {} entries, mean {}, cov is {d}x{d}",
            x.len(),
            mean.len()
        )));
    }
    let (l, _) = cholesky_auto(cov)?;
    Ok(gaussian_logpdf_prefactored(x, mean, &l))
}

/// As [`gaussian_logpdf`] but with the Cholesky factor already computed.
pub fn gaussian_logpdf_prefactored(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
) -> f64 {
    let d = l.nrows() as f64;
    let log_det_half: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    let v = solve_lower(l, &(x - mean));
    -0.5 * d * (std::f64::consts::TAU).ln() - log_det_half - 0.5 * v.norm_squared()
}

/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
///
/// Errors if any evaluation of `f` is non-finite.
pub fn finite_diff_grad<F>(mut f: F, x: &DVector<f64>, eps: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut grad = DVector::<f64>::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f non-finite near coordinate {i} (f+={fp}, f-={fm})"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}
