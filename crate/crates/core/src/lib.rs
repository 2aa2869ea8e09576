//! Penalized generalized additive models for epidemic surveillance data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod basis;
pub mod design;
pub mod family;
pub mod glm;
pub mod hosp;
pub mod icu;
pub mod infection;
pub mod linalg;
pub mod multinomial;
pub mod nowcast;
pub mod rng;
