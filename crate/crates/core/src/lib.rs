//! Photon-number statistics of two-mode squeezed light.
//!
//! The crate builds truncated joint photon-number distributions of
//! multimode parametric down-conversion with coherent and thermal
//! backgrounds, passes them through binomial loss, evaluates correlation
//! functions and nonclassicality witnesses, fits the eight-parameter loss
//! model to histograms, and classifies synthetic transition-edge-sensor
//! traces by template overlap.
//!
//! The analytic modules are generic over [`num::Real`]; the aliases below
//! fix the scalar to `f64`, which is what the sampling, fitting and I/O
//! layers use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channels;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod num;
pub mod statistics;
pub mod tes;

pub use distributions::{
    background_marginal, compose_state, marginals, multimode_pdc, required_dim,
    schmidt_spectrum, tmsv_joint, Arm, Background, JointCounts, ModelParams, Truncation,
};
pub use error::{Error, Result};
pub use num::Real;

/// Joint signal x idler distribution in double precision.
pub type JointDist = distributions::JointDistribution<f64>;
/// Single-arm distribution in double precision.
pub type MarginalDist = distributions::MarginalDistribution<f64>;
/// Schmidt spectrum in double precision.
pub type SchmidtSpectrum = distributions::SchmidtSpectrum<f64>;




