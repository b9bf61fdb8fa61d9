// Indexed loops mirror the matrix algebra; `!(x > 0)` deliberately rejects
// NaN along with nonpositive values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

//! Data selection and model selection with the Stein volume criterion.
//!
//! The crate estimates a normalized kernelized Stein discrepancy (NKSD) from
//! data, turns it into a generalized marginal likelihood with exact, Laplace
//! and BIC evaluations, and drives leave-one-out data-selection experiments
//! for Gaussian-location and probabilistic PCA models.

pub mod calibrate;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernel;
pub mod nksd;
pub mod optimize;
pub mod ppca;
pub mod report;
pub mod score;
pub mod selection;
pub mod svc;

pub use data::DataMatrix;
pub use error::{Error, Result};
pub use kernel::{KernelSpec, PairwiseStats};
