//! Multi-expert mutual learning for unsupervised domain adaptive
//! re-identification.
//!
//! Several heterogeneous encoders are trained on a labelled source domain,
//! then adapted together to an unlabelled target domain. Each epoch the
//! experts' averaged features are clustered into pseudo-labels; every expert
//! then learns from those labels and from the temporal-average predictions of
//! its peers, weighted by how well each peer separates the target data.

pub mod authority;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod experts;
pub mod losses;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};

/// Version string recorded in every run directory.
pub const CODE_VERSION: &str = concat!("meb-core ", env!("CARGO_PKG_VERSION"));
