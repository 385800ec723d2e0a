//! Bayesian inference for overparameterized generalized linear and
//! single-neuron regression models.
//!
//! The prior on the coefficient vector is a truncated Gaussian whose
//! covariance is a rank-k truncation of the empirical covariance built from
//! half of the sample; the other half supplies the likelihood. The posterior
//! is approximated by stochastic variational inference with analytic
//! reparameterization gradients, and the predictive distribution provides
//! uncertainty-aware classification and regression metrics.
//!
//! Module map:
//! * [`spectral`] — covariance estimation, eigendecomposition, truncation,
//!   pseudoinverse action
//! * [`glm`] — link functions and exponential-family likelihoods
//! * [`prior`] — the effective-spectral prior and the inverse-Gaussian
//!   variance prior
//! * [`vi`] — the variational family, objective, gradients, and Adam loop
//! * [`datagen`] — simulation generators, splitting, file ingestion
//! * [`eval`] — predictive summaries and metrics
//! * [`baseline`] — principal component regression with cross-validation
//! * [`pipeline`] — end-to-end fit and the model container
//! * [`gradcheck`] — the finite-difference verification battery

pub mod baseline;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod glm;
pub mod gradcheck;
pub mod pipeline;
pub mod prior;
pub mod spectral;
pub mod vi;

pub use error::{Error, Result};
