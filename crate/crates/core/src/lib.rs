//! Lipschitz-certified regression in vector-valued reproducing kernel Hilbert
//! spaces, and identification of monotone operators through their scattering
//! transform.
//!
//! - [`numerics`]: symmetric matrices, eigen-decompositions, SPD solves.
//! - [`kernels`]: operator-valued kernels and nonexpansiveness audits.
//! - [`estimator`]: regularized least squares, norm tuning, persistence.
//! - [`monotone`]: scattering transform and Picard simulation of `R`.
//! - [`hodgkin`]: potassium-conductance benchmark from the Hodgkin–Huxley model.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod hodgkin;
pub mod kernels;
pub mod monotone;
pub mod numerics;
pub mod sampling;

pub use error::{Error, Result};
pub use estimator::{fit, tune_gamma, Dataset, FittedModel, TuneOptions};
pub use kernels::{audit_nonexpansive, KernelSpec, OperatorKernel};
pub use monotone::{fit_monotone, simulate, MonotoneModel, PicardConfig};
