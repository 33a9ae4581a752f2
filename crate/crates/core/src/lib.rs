//! Poisson binomial mechanism (PBM) for differentially private distributed
//! mean estimation over a simulated secure-aggregation channel.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod dme;
pub mod error;
pub mod kashin;
pub mod scalar;
pub mod secagg;
pub mod sgd;
pub mod vector;

pub use error::{PbmError, Result};
