//! Hierarchical random covariance model: a common covariance structure is
//! drawn per study from an inverse-Wishart prior and observations within a
//! study are zero-mean Gaussian around it. The crate covers simulation,
//! marginal-likelihood evaluation, estimation (pooled, EM, approximate MLE),
//! homogeneity inference, benchmarking, and data ingestion with post-hoc
//! module clustering.

pub mod benchmark;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod ingest;
pub mod likelihood;
pub mod matrixcore;
pub mod sampling;

pub use error::{RcmError, Result};
