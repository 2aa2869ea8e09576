use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BasisError, Result};

/// Clamped B-spline basis on equidistant interior knots.
///
/// The knot vector repeats each boundary `degree + 1` times, so the basis
/// is a partition of unity on `[lo, hi]` and evaluation outside the domain
/// is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineSpec {
    pub degree: usize,
    pub num_basis: usize,
    pub lo: f64,
    pub hi: f64,
    pub penalty_order: usize,
}

impl BSplineSpec {
    pub fn new(
        degree: usize,
        num_basis: usize,
        lo: f64,
        hi: f64,
        penalty_order: usize,
    ) -> Result<Self> {
        if degree < 1 {
            return Err(BasisError::InvalidSpec("degree must be at least 1".into()));
        }
        if num_basis < degree + 2 {
            return Err(BasisError::InvalidSpec(format!(
                "num_basis {num_basis} must be at least degree + 2 = {}",
                degree + 2
            )));
        }
        if penalty_order >= num_basis {
            return Err(BasisError::InvalidSpec(format!(
                "penalty order {penalty_order} must be below num_basis {num_basis}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(BasisError::InvalidSpec(format!("invalid domain [{lo}, {hi}]")));
        }
        Ok(Self {
            degree,
            num_basis,
            lo,
            hi,
            penalty_order,
        })
    }

    /// Cubic spline with second-order penalty.
    pub fn cubic(num_basis: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(3, num_basis, lo, hi, 2)
    }

    /// A zero-width domain collapses the basis to a single constant column.
    pub fn is_degenerate(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn dim(&self) -> usize {
        if self.is_degenerate() {
            1
        } else {
            self.num_basis
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        let p = self.degree;
        let intervals = self.num_basis - p;
        let h = (self.hi - self.lo) / intervals as f64;
        let mut t = Vec::with_capacity(self.num_basis + p + 1);
        t.extend(std::iter::repeat_n(self.lo, p));
        for i in 0..=intervals {
            t.push(if i == intervals { self.hi } else { self.lo + h * i as f64 });
        }
        t.extend(std::iter::repeat_n(self.hi, p));
        t
    }

    fn check(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(BasisError::NonFinite(x));
        }
        let tol = 1e-9 * (self.hi - self.lo).abs().max(1.0);
        if x < self.lo - tol || x > self.hi + tol {
            return Err(BasisError::OutsideDomain {
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(x.clamp(self.lo, self.hi))
    }

    /// Basis evaluation matrix (n × num_basis).
    pub fn evaluate(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if self.is_degenerate() {
            log::warn!(
                "B-spline domain has zero width at {}; using a constant column",
                self.lo
            );
            for &v in x {
                self.check(v)?;
            }
            return Ok(DMatrix::from_element(x.len(), 1, 1.0));
        }
        let knots = self.knots();
        let p = self.degree;
        let mut out = DMatrix::zeros(x.len(), self.num_basis);
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for (row, &raw) in x.iter().enumerate() {
            let v = self.check(raw)?;
            let span = find_span(&knots, self.num_basis, p, v);
            // Nonzero basis functions at v (de Boor / Cox recursion).
            n[0] = 1.0;
            for j in 1..=p {
                left[j] = v - knots[span + 1 - j];
                right[j] = knots[span + j] - v;
                let mut saved = 0.0;
                for r in 0..j {
                    let denom = right[r + 1] + left[j - r];
                    let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                    n[r] = saved + right[r + 1] * temp;
                    saved = left[j - r] * temp;
                }
                n[j] = saved;
            }
            for (j, value) in n.iter().enumerate() {
                out[(row, span - p + j)] = *value;
            }
        }
        Ok(out)
    }

    /// Difference matrix of the configured order ((k − order) × k).
    pub fn difference_matrix(&self) -> DMatrix<f64> {
        difference_matrix(self.dim(), self.penalty_order.min(self.dim().saturating_sub(1)))
    }

    /// S = DᵀD.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        if self.is_degenerate() {
            return DMatrix::zeros(1, 1);
        }
        let d = self.difference_matrix();
        d.tr_mul(&d)
    }
}

fn find_span(knots: &[f64], num_basis: usize, p: usize, x: f64) -> usize {
    if x >= knots[num_basis] {
        return num_basis - 1;
    }
    // Largest i in [p, num_basis - 1] with knots[i] <= x.
    let mut lo = p;
    let mut hi = num_basis;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if knots[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub(crate) fn difference_matrix(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, k);
        for i in 0..rows {
            for j in 0..k {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    d
}
