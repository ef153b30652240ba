//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance below which a negative eigenvalue still counts as nonnegative.
pub const PSD_TOL: f64 = 1e-12;

pub fn max_asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && max_asymmetry(m) <= tol
}

pub fn sym_part(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let eig = SymmetricEigen::new(sym_part(m));
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn lambda_min(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn lambda_max(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().fold(0.0, |a, &b| a.max(b))
}

pub fn require_symmetric(name: &str, m: &Mat) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidModel(format!("`{name}` must be square")));
    }
    let asym = max_asymmetry(m);
    let scale = m.amax().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric {
            name: name.to_string(),
            asymmetry: asym,
        });
    }
    Ok(())
}

pub fn require_psd(name: &str, m: &Mat) -> Result<f64> {
    require_symmetric(name, m)?;
    let min = lambda_min(m);
    if min < -PSD_TOL {
        return Err(Error::NotPositiveSemidefinite {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(min)
}

pub fn require_pd(name: &str, m: &Mat) -> Result<f64> {
    require_symmetric(name, m)?;
    let min = lambda_min(m);
    if min <= PSD_TOL {
        return Err(Error::NotPositiveDefinite {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(min)
}

pub fn inverse(name: &str, m: &Mat) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(name.to_string()))
}

/// Lower-triangular factor `L` with `L Lᵀ = m` for a symmetric PSD matrix.
///
/// Pivots that fall below a relative tolerance are treated as exact zeros, so
/// singular covariances (degenerate noise) yield exact zero columns.
pub fn psd_cholesky(m: &Mat) -> Mat {
    let n = m.nrows();
    let mut l = Mat::zeros(n, n);
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let tol = 1e-13 * scale;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    l
}

/// `out += m * x` for column-major `m` and plain slices.
#[inline]
pub fn mv_add(m: &Mat, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    debug_assert_eq!(c, x.len());
    debug_assert_eq!(r, out.len());
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * r..(j + 1) * r];
        for (o, &a) in out.iter_mut().zip(col) {
            *o += a * xj;
        }
    }
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Pairwise summation; result does not depend on how the slice was produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
