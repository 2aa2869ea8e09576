use nalgebra::{DMatrix, DVector};

use super::{BasisError, Result};
use crate::linalg::{constraint_null_space, symmetrize};

/// A basis reparameterized so every column sums to zero over the data.
#[derive(Debug, Clone)]
pub struct CenteredBasis {
    pub basis: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    /// k × (k − 1) map from reduced to original coefficients.
    pub transform: DMatrix<f64>,
}

/// Imposes `1ᵀ X β = 0` by the Householder null-space reparameterization
/// `β = Z γ`, returning `XZ`, `ZᵀSZ` and `Z`.
pub fn apply_centering_constraint(
    basis: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
) -> Result<CenteredBasis> {
    let (n, k) = basis.shape();
    if n < k {
        return Err(BasisError::TooFewRows { rows: n, cols: k });
    }
    let sums = DVector::from_iterator(k, basis.column_iter().map(|c| c.sum()));
    let scale = basis.iter().fold(0.0_f64, |a, v| a.max(v.abs())) * n as f64;
    if sums.norm() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
        return Err(BasisError::DegenerateConstraint);
    }
    if k == 1 {
        return Ok(CenteredBasis {
            basis: DMatrix::zeros(n, 0),
            penalty: DMatrix::zeros(0, 0),
            transform: DMatrix::zeros(1, 0),
        });
    }
    let z = constraint_null_space(&sums).ok_or(BasisError::DegenerateConstraint)?;
    let reduced = basis * &z;
    let mut s = z.transpose() * penalty * &z;
    symmetrize(&mut s);
    Ok(CenteredBasis {
        basis: reduced,
        penalty: s,
        transform: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_column_is_removed() {
        let x = DMatrix::from_element(5, 1, 1.0);
        // A single constant column has nothing left after centering.
        let x2 = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        assert!(apply_centering_constraint(&x, &DMatrix::identity(1, 1)).is_ok_and(|c| c.basis.ncols() == 0));
        let c = apply_centering_constraint(&x2, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(c.basis.ncols(), 1);
        assert!(c.basis.column(0).sum().abs() < 1e-12);
        // The remaining column is a centered copy of the linear column.
        let col = c.basis.column(0);
        let ratio = col[4] / (4.0 - 2.0);
        for i in 0..5 {
            assert!((col[i] - ratio * (i as f64 - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_penalty_stays_psd() {
        let x = DMatrix::from_fn(6, 3, |i, j| ((i + 1) * (j + 2)) as f64 % 5.0 + 0.5);
        let c = apply_centering_constraint(&x, &DMatrix::identity(3, 3)).unwrap();
        let (vals, _) = crate::linalg::sym_eigen_sorted(&c.penalty);
        assert!(vals.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn zero_sums_are_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(
            apply_centering_constraint(&x, &DMatrix::identity(2, 2)).unwrap_err(),
            BasisError::DegenerateConstraint
        );
    }
}
