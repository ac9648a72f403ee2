//! Fair visual clustering over face-style embeddings.
//!
//! The pipeline builds an ordered kNN cluster around every sample, splits
//! it into rank-contiguous sub-clusters, scores each member with a
//! transformer that attends within sub-clusters and across them to the
//! centroid, and merges confident links into a global partition. Training
//! combines a Fowlkes-Mallows loss with a penalty that pulls all cluster
//! purities in a mini-batch toward a shared reference.

pub mod attention;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod neighborhood;
pub mod postprocess;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
