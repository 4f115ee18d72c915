//! Spectral analysis of random block-Jacobi (strip) operators: channel
//! decomposition, transfer matrices, the Schur-complement recursion, density
//! estimates and Monte Carlo bounds.

// `!(x > y)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channels;
pub mod error;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod schur;
pub mod spectral;
pub mod transfer;

pub use error::{Error, Result};
