//! Dense one-to-one correspondence learning between point clouds.
//!
//! The pipeline extracts per-point descriptors, scores every source/target
//! pair, relaxes the score matrix to a doubly stochastic matrix with
//! Gumbel-Sinkhorn, and projects that onto a permutation with the Hungarian
//! algorithm. Training passes the loss gradient straight through the
//! projection to the doubly stochastic matrix.

pub mod assignment;
pub mod cli;
pub mod cloud;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcore;
pub mod matchnet;
pub mod metrics;
pub mod rigid;
pub mod sinkhorn;
pub mod trainer;

pub use cloud::{Point3, PointCloud};
pub use error::{Error, Result};
pub use gradcore::{GradError, NodeId, Tape, Tensor};
