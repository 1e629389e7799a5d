//! Exemplar-free class-incremental learning.
//!
//! The pipeline filters images by a learned low-rank/sparse split ([`rpca`]),
//! extracts features with a small CNN or ingests externally computed ones
//! ([`backbone`]), expands them through a frozen random projection and keeps
//! only second-order statistics per class ([`projector`]). Branch scores are
//! combined in [`fusion`]; [`harness`] drives whole task sequences and computes
//! the forgetting metrics.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod datahub;
pub mod fusion;
pub mod harness;
pub mod projector;
pub mod rpca;
pub mod seed;
