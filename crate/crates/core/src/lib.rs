//! Scalar summaries of longitudinal outcome trajectories.
//!
//! Groups of subject trajectories are reduced to a rate-of-change summary
//! (change score, mean change from a mixed model, straight-line slope,
//! ANCOVA endpoint effect, or a weighted average tangent slope) and compared
//! with Wald, t, and likelihood-ratio tests. The [`harness`] module runs
//! Monte-Carlo power and type-I error studies under several missing-data
//! mechanisms, with optional multivariate-normal multiple imputation.

pub mod basisfn;
pub mod data;
pub mod harness;
pub mod error;
pub mod inference;
pub mod lmm;
pub mod missing;
pub mod optim;
pub mod quadrature;
pub mod seed;
pub mod simgen;
pub mod summaries;
pub mod wats;

pub use error::{Error, Result};
