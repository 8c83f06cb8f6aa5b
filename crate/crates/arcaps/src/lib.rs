//! Training, evaluation and equivariance analysis of attention-routing
//! capsule networks, with the file formats and the `arcaps` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod report;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
