//! Gaussian-process regression with exact and sparse variational inference.
//!
//! Matrices hold one input point per row. Hyperparameters are optimized in an
//! unconstrained log-space; see [`kernels::pack`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod data;
pub mod error;
pub mod exact_gpr;
pub mod inducing;
pub mod kernels;
pub mod metrics;
pub mod numerics;
pub mod optimizer;
pub mod sgpr;
pub mod svgp;

pub use error::{GpError, Result};
pub use kernels::{HyperVector, KernelFamily, KernelSpec, MaternNu};
