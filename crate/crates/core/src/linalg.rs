//! Small dense linear-algebra kernels used across the crate.
//!
//! Spectral norms come from power iteration on `AᵀA` and the matrix
//! exponential from scaling and squaring of a converged Taylor series, so
//! no eigensolver is required on the hot paths.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance on the Rayleigh quotient for power iteration.
pub const POWER_ITER_TOL: f64 = 1e-12;
/// Iteration cap for power iteration.
pub const POWER_ITER_MAX: usize = 10_000;

fn start_vector(n: usize) -> DVector<f64> {
    // Entries 1, 1/2, 1/3, ... avoid accidental orthogonality to the
    // dominant eigenvector for the structured matrices we see in practice.
    let v = DVector::from_fn(n, |i, _| 1.0 / (i as f64 + 1.0));
    let norm = v.norm();
    v / norm
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
fn power_iteration_psd(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = start_vector(n);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= POWER_ITER_TOL * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Induced 2-norm, the square root of the largest eigenvalue of `AᵀA`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let ata = a.transpose() * a;
    power_iteration_psd(&ata).max(0.0).sqrt()
}

/// Smallest eigenvalue of a symmetric matrix, by power iteration on the
/// shifted matrix `σI − M` with `σ` an upper bound on the spectrum.
pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // Gershgorin bound on the spectral radius.
    let sigma = (0..n)
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let shifted = DMatrix::identity(n, n) * sigma - m;
    sigma - power_iteration_psd(&shifted)
}

/// Symmetric and positive definite within `1e-12` relative asymmetry.
pub fn is_symmetric_positive_definite(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.nrows() == 0 {
        return false;
    }
    let scale = m.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let asym = (m - m.transpose()).iter().map(|x| x.abs()).fold(0.0, f64::max);
    asym <= 1e-12 * scale && min_eigenvalue_sym(m) > 0.0
}

fn norm_one(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring.
///
/// The argument is scaled by `2^-s` until its 1-norm is at most 1/2, the
/// Taylor series is summed until terms stop contributing at machine
/// precision, and the result is squared `s` times.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert!(a.is_square(), "expm needs a square matrix");
    let norm = norm_one(a);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..64 {
        term = &term * &scaled / (k as f64);
        sum += &term;
        if norm_one(&term) <= f64::EPSILON * 1e-2 * norm_one(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Smallest singular value of a tall matrix with full column rank candidate.
pub fn min_singular_value(b: &DMatrix<f64>) -> f64 {
    if b.ncols() == 0 {
        return 0.0;
    }
    let btb = b.transpose() * b;
    min_eigenvalue_sym(&btb).max(0.0).sqrt()
}

/// Left pseudoinverse `(BᵀB)⁻¹Bᵀ` of a full-column-rank matrix.
pub fn left_pseudoinverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sigma_min = min_singular_value(b);
    if sigma_min <= 1e-10 {
        return Err(Error::RankDeficient { sigma_min });
    }
    let btb = b.transpose() * b;
    let chol = btb
        .cholesky()
        .ok_or(Error::RankDeficient { sigma_min })?;
    Ok(chol.solve(&b.transpose()))
}

/// Moore–Penrose pseudoinverse through the SVD, for possibly rank-deficient
/// Jacobians in Gauss–Newton steps.
pub fn pseudoinverse(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond * smax;
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let k = svd.singular_values.len();
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            out += (vt.row(i).transpose() * u.column(i).transpose()) / s;
        }
    }
    out
}

/// Centroid and orthonormal basis of the affine hull of a point set.
pub fn affine_basis(points: &[DVector<f64>], rel_tol: f64) -> (DVector<f64>, DMatrix<f64>) {
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut centroid = DVector::zeros(dim);
    for p in points {
        centroid += p;
    }
    centroid /= n;
    let mut m = DMatrix::zeros(dim, points.len());
    for (j, p) in points.iter().enumerate() {
        m.set_column(j, &(p - &centroid));
    }
    let svd = m.svd(true, false);
    let u = svd.u.expect("svd u");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut cols = Vec::new();
    for (i, s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && *s > rel_tol * smax.max(1.0) {
            cols.push(u.column(i).into_owned());
        }
    }
    let basis = if cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (centroid, basis)
}
