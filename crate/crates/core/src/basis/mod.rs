//! Basis expansions and quadratic penalties for the smooth model terms.
//!
//! Four families are provided:
//!
//! * [`BSplineSpec`]: clamped B-splines on equidistant knots with a
//!   difference penalty (P-splines).
//! * [`TruncatedLinearSpec`]: `t` plus hinge functions `(t - s*l)_+`, ridge
//!   penalized on the hinge coefficients only.
//! * [`ThinPlateSpec`]: low-rank thin-plate regression spline in two
//!   dimensions, including the affine null space.
//! * [`RandomInterceptSpec`]: one dummy column per group level with an
//!   identity penalty.
//!
//! All constructors and evaluations are pure functions.

mod bspline;
mod constraint;
mod random;
mod thin_plate;
mod truncated;

pub use bspline::BSplineSpec;
pub use constraint::{apply_centering_constraint, CenteredBasis};
pub use random::RandomInterceptSpec;
pub use thin_plate::{ThinPlateBasis, ThinPlateSpec};
pub use truncated::TruncatedLinearSpec;

use thiserror::Error;

/// Default number of basis functions for one-dimensional smooths.
pub const DEFAULT_1D_BASIS: usize = 10;
/// Default rank of two-dimensional thin-plate smooths.
pub const DEFAULT_TPS_RANK: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("value {value} lies outside the basis domain [{lo}, {hi}]")]
    OutsideDomain { value: f64, lo: f64, hi: f64 },

    #[error("non-finite input value {0}")]
    NonFinite(f64),

    #[error("invalid basis settings: {0}")]
    InvalidSpec(String),

    #[error("unknown level '{0}' for random intercept")]
    UnknownLevel(String),

    #[error("thin-plate basis needs at least 3 distinct non-collinear centers, got {0}")]
    InsufficientCenters(usize),

    #[error("centering constraint is rank deficient: all column sums are zero")]
    DegenerateConstraint,

    #[error("centering needs at least as many rows ({rows}) as columns ({cols})")]
    TooFewRows { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, BasisError>;
