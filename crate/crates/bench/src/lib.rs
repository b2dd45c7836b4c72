//! Benchmark harness for Gaussian-process regression methods.

pub mod baselines;
pub mod report;
pub mod runner;
pub mod smoothing;
