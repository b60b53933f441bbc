//! Discriminative probabilistic modeling over continuous domains.
//!
//! The crate estimates softmax partition functions by multiple importance
//! sampling, fits non-parametric popularity weights by convex optimization,
//! trains similarity models with the NUCLR algorithm, and provides a 2-D
//! synthetic world with closed-form ground truth for benchmarking.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by the CLI.

pub mod dataset;
pub mod error;
pub mod matrix;
pub mod mis;
pub mod model;
pub mod nuclr;
pub mod popularity;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PairedSample = world::PairedSample<f64>;
pub type AnchorPoint = world::AnchorPoint<f64>;
pub type TargetPoint = world::TargetPoint<f64>;
pub type SimilarityMatrix = matrix::SimilarityMatrix<f64>;
pub type SimilarityModel = model::SimilarityModel<f64>;
pub type LinearCosine = model::LinearCosine<f64>;
pub type PopularityApprox = mis::PopularityApprox<f64>;
pub type PopularitySolution = popularity::PopularitySolution<f64>;
pub type SolverOptions = popularity::SolverOptions<f64>;
pub type NuclrState = nuclr::NuclrState<f64>;
