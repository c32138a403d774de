//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! `‖·‖` means the spectral norm everywhere in this crate.

use crate::{Error, Mat, Result};

/// Relative tolerance below which a negative eigenvalue still counts as PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Absolute asymmetry allowed for covariance inputs.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

pub fn singular_values(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    sv
}

pub fn spectral_norm(m: &Mat) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

pub fn min_singular_value(m: &Mat) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Numerical rank with the usual `max(rows, cols) · ε · σ_max` cutoff.
pub fn rank(m: &Mat) -> usize {
    let sv = singular_values(m);
    let Some(&top) = sv.last() else { return 0 };
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * top;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn is_psd(m: &Mat) -> bool {
    min_eigenvalue(m) >= -PSD_TOLERANCE * spectral_norm(m).max(1.0)
}

/// Condition number of a symmetric positive definite matrix.
pub fn spd_condition(m: &Mat) -> f64 {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Lower Cholesky factor, failing loudly (no jitter) on non-PD input.
pub fn cholesky_lower(m: &Mat, field: &str) -> Result<Mat> {
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite {
            field: field.to_string(),
        })
}

/// A factor `F` with `F Fᵀ = m` for a symmetric PSD matrix, through the
/// eigendecomposition so singular inputs (e.g. `P₀ = 0`) are accepted.
pub fn psd_factor(m: &Mat, field: &str) -> Result<Mat> {
    let sym = symmetrize(m);
    let scale = spectral_norm(&sym).max(1.0);
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NotPositiveSemidefinite {
            field: field.to_string(),
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Mat::from_diagonal(&roots))
}

pub fn matrix_power(a: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Stacked observability matrix `[C; CA; ...; CA^{N-1}]`.
pub fn observability_matrix(a: &Mat, c: &Mat) -> Mat {
    let n = a.nrows();
    let m = c.nrows();
    let mut out = Mat::zeros(m * n, n);
    let mut block = c.clone();
    for k in 0..n {
        out.view_mut((k * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    out
}

/// Frobenius norm of a list of stage matrices taken as one vector.
pub fn stacked_frobenius(mats: &[Mat]) -> f64 {
    mats.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}
