//! Bayesian optimization over mixed quantitative/qualitative design spaces.
//!
//! The surrogate is a Gaussian process whose correlation function maps every
//! level of a qualitative factor to a point in a 2-D latent plane, so that
//! latent distances play the role of quantitative distances. Latent
//! coordinates, roughness parameters and (for noisy responses) a nugget are
//! estimated jointly by profiled maximum likelihood.
//!
//! Modules, bottom-up:
//! - [`space`]: design spaces, points, datasets
//! - [`kernel`]: correlation function and correlation-matrix factorization
//! - [`model`]: likelihood, fitting, prediction, latent export
//! - [`acquisition`]: expected improvement and its maximization
//! - [`design`]: maximin Latin hypercube initial designs
//! - [`engine`]: ask/tell campaigns and the sequential loop
//! - [`benchmarks`]: analytic and tabular test objectives

pub mod acquisition;
pub mod benchmarks;
pub mod design;
pub mod engine;
pub mod error;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod space;

pub use error::{Error, Result};
pub use kernel::{KernelParams, LatentEmbedding};
pub use model::{fit, FitConfig, FittedModel, Prediction};
pub use space::{Dataset, DesignSpace, MixedPoint};
