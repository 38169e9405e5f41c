//! Numerical homogenization and averaging for slow-fast reaction-diffusion
//! systems with periodically oscillating coefficients.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod avg;
pub mod cell;
pub mod coeffs;
pub mod ergodic;
pub mod error;
pub mod fastsde;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod slowpde;

pub use error::{Error, Result};
pub use par::Execution;
