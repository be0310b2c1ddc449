//! Explicit flow matching: exact marginal vector fields, Monte Carlo
//! estimators of the regression target, CFM/ExFM training and samplers.
// `!(x > 0.0)` is used on purpose: it also rejects NaN. Index loops keep
// the numeric kernels close to their formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datasets;
pub mod densities;
pub mod dispersion;
pub mod error;
pub mod estimators;
pub mod exact_fields;
pub mod flow_maps;
pub mod integrators;
pub mod metrics;
pub mod nn;
pub mod quadrature;
pub mod rng;
pub mod training;

pub use densities::{Density, EmpiricalSet, Gaussian, GaussianMixture};
pub use error::{Error, Result};
pub use flow_maps::{ConditionalGaussianPath, ConditionalMap, Schedule};
