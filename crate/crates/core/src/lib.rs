//! Spatio-temporal decomposition of station observation series.
//!
//! A station-by-quarter panel is modeled as the sum of a random-walk trend, a
//! dummy-variable seasonal, an autoregressive cycle, fixed covariate effects
//! and a Matern spatial field represented on a triangulated mesh through the
//! stochastic PDE link. All components are Gaussian Markov random fields
//! with sparse precision matrices; inference integrates the hyperparameters
//! with nested Laplace approximations, which are exact for the Gaussian
//! observation model used here.
//!
//! Module map:
//! - [`mesh`]: two-zone triangulations and barycentric projection
//! - [`spde`]: finite-element Matern precision matrices
//! - [`temporal`]: trend / seasonal / cycle precision blocks
//! - [`model`]: datasets, joint latent field, Gaussian posterior
//! - [`inference`]: hyperparameter posterior, marginals, evidence, DIC
//! - [`predict`]: surfaces, forecasts, accuracy metrics
//! - [`simulate`]: generative sampling for synthetic studies
//! - [`sparse`] / [`cholesky`]: the sparse matrix engine underneath

pub mod batch;
pub mod special;
pub mod mesh;
pub mod spde;
pub mod temporal;
pub mod model;
pub mod inference;
pub mod simulate;
pub mod predict;
pub mod cholesky;
pub mod error;
pub mod sparse;

pub use error::{Error, Result};
