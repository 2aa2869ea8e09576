use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BasisError, Result};

/// Piece-wise linear time effect `θ t + Σ_l α_l (t − spacing·l)_+` over
/// the domain `[1, t_max]`, with hinges at every multiple of the spacing
/// strictly below `t_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedLinearSpec {
    pub knot_spacing: u32,
    pub t_max: f64,
}

impl TruncatedLinearSpec {
    pub const DEFAULT_SPACING: u32 = 28;

    pub fn new(knot_spacing: u32, t_max: f64) -> Result<Self> {
        if knot_spacing == 0 {
            return Err(BasisError::InvalidSpec("knot spacing must be positive".into()));
        }
        if !(t_max >= 1.0) {
            return Err(BasisError::InvalidSpec(format!("t_max {t_max} must be ≥ 1")));
        }
        Ok(Self {
            knot_spacing,
            t_max,
        })
    }

    pub fn hinges(&self) -> Vec<f64> {
        let s = f64::from(self.knot_spacing);
        (1..)
            .map(|l| s * l as f64)
            .take_while(|&k| k < self.t_max)
            .collect()
    }

    pub fn dim(&self) -> usize {
        1 + self.hinges().len()
    }

    pub fn evaluate(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        let hinges = self.hinges();
        let mut out = DMatrix::zeros(t.len(), 1 + hinges.len());
        for (i, &v) in t.iter().enumerate() {
            if !v.is_finite() {
                return Err(BasisError::NonFinite(v));
            }
            if v < 1.0 - 1e-9 || v > self.t_max + 1e-9 {
                return Err(BasisError::OutsideDomain {
                    value: v,
                    lo: 1.0,
                    hi: self.t_max,
                });
            }
            out[(i, 0)] = v;
            for (l, &k) in hinges.iter().enumerate() {
                out[(i, l + 1)] = (v - k).max(0.0);
            }
        }
        Ok(out)
    }

    /// Identity on the hinge coefficients, zero on the slope.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut s = DMatrix::identity(k, k);
        s[(0, 0)] = 0.0;
        s
    }
}
