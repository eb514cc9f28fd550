//! Bayesian estimation of multivariate spectra that vary with a
//! subject-level outcome.
//!
//! The guide in `book/` walks through each module with runnable listings.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod checkpoint;
pub mod error;
pub mod ingest;
pub mod sampler;
pub mod simstudy;
pub mod summaries;
pub mod whittle;

pub use error::{Error, Result};
