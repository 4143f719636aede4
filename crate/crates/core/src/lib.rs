//! Differentially private consensus ADMM for regularized empirical risk
//! minimization over a simulated network of nodes.

pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod privacy;
pub mod runner;
pub mod topology;
pub mod vector;

pub use error::{Error, Result};
