//! Transfer-learning regularized discriminant analysis with random-matrix
//! limits for the classification error and optimal source weights.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod fit;
pub mod hyper;
pub mod linalg;
pub mod real;
pub mod risk;
pub mod sample;
pub mod simgen;
pub mod spectral;
pub mod weights;

pub use error::{Error, Result};
pub use real::Real;

/// Hyperparameters at double precision.
pub type Hyper = hyper::HyperParams<f64>;
/// Spectral summary at double precision.
pub type Summary = spectral::SpectralSummary<f64>;
/// Weight problem at double precision.
pub type Problem = weights::WeightProblem<f64>;
/// Solved weights at double precision.
pub type Weights = weights::TransferWeights<f64>;
