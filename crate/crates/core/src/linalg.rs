//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Xᵀ diag(w) X.
pub fn xtwx(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    // An explicit transpose lets the product use the blocked kernel.
    let mut xtw = x.transpose();
    for (mut col, wi) in xtw.column_iter_mut().zip(w) {
        col *= *wi;
    }
    xtw * x
}

/// Xᵀ diag(w) z.
pub fn xtwz(x: &DMatrix<f64>, w: &[f64], z: &[f64]) -> DVector<f64> {
    let wz = DVector::from_iterator(z.len(), w.iter().zip(z).map(|(a, b)| a * b));
    x.tr_mul(&wz)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and eigenvectors as matching columns.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let n = m.nrows();
    let mut vectors = DMatrix::zeros(n, order.len());
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Inverse of a symmetric positive definite matrix, `None` if Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let chol = s.cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.cholesky().map(|c| c.solve(b))
}

/// Smallest eigenvalue of the unit-diagonal rescaling of `m` relative to the
/// largest, and the matching direction in the original coordinates.
///
/// Used to detect unidentified columns: a ratio near zero means some linear
/// combination of columns carries no information.
pub fn weakest_direction(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let n = m.nrows();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let v = m[(i, i)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut scaled = m.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= d[i] * d[j];
        }
    }
    // A zero diagonal means an all-zero column: report it directly.
    if let Some(i) = d.iter().position(|&v| v == 0.0) {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        return (0.0, e);
    }
    let (values, vectors) = sym_eigen_sorted(&scaled);
    let max = values.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let min = *values.last().unwrap_or(&0.0);
    let v = vectors.column(n - 1).clone_owned();
    (min / max, v)
}

/// Clips negative eigenvalues of a symmetric matrix to zero. Returns the
/// repaired matrix and whether anything was clipped.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let (values, vectors) = sym_eigen_sorted(m);
    let scale = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut clipped = false;
    let lam = DVector::from_iterator(
        values.len(),
        values.iter().map(|&v| {
            if v < -tol {
                clipped = true;
            }
            v.max(0.0)
        }),
    );
    let mut out = &vectors * DMatrix::from_diagonal(&lam) * vectors.transpose();
    symmetrize(&mut out);
    (out, clipped)
}

/// Lower factor L with LLᵀ = m for a PSD matrix (eigen-based, so it also
/// works for singular covariances).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_sorted(m);
    let mut f = vectors;
    for (j, v) in values.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        for i in 0..f.nrows() {
            f[(i, j)] *= s;
        }
    }
    f
}

/// Householder-based orthonormal basis of the null space of the single
/// linear constraint `cᵀβ = 0`; returns a k×(k−1) matrix.
pub fn constraint_null_space(c: &DVector<f64>) -> Option<DMatrix<f64>> {
    let k = c.len();
    let norm = c.norm();
    if k < 2 || !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vtv = v.dot(&v);
    let h = DMatrix::identity(k, k) - (&v * v.transpose()) * (2.0 / vtv);
    Some(h.columns(1, k - 1).clone_owned())
}
