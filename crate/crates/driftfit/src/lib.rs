//! Doubly robust covariate shift adaptation.
//!
//! Given labeled train data `{(Y_i, X_i)}` drawn from `p(y, x)` and unlabeled
//! test covariates `{X̃_j}` drawn from the marginal of `q(y, x)`, where the two
//! distributions share the conditional law of the outcome but differ in their
//! covariate marginals, this crate fits parametric regression models that
//! minimize the test-data risk. The headline estimator combines an estimated
//! density ratio `r̂(x) ≈ q(x)/p(x)` with an auxiliary regression estimate
//! `f̂(x) ≈ E[Y | X = x]` through cross-fitting, and stays consistent when
//! either nuisance is consistent.
//!
//! Modules:
//! - [`numkit`] — dense SPD solves, Cholesky with jitter retry, seeded RNG streams.
//! - [`datamodel`] — datasets, fold plans, estimator configuration.
//! - [`density_ratio`] — Gaussian-kernel uLSIF with closed-form solve and grid CV.
//! - [`models`] — linear-in-basis and logistic models, OLS/WLS, kernel ridge regression.
//! - [`drcsa`] — the cross-fitted doubly robust risk, its closed form, SDB and SCSA variants.
//! - [`inference`] — plug-in sandwich covariance, pointwise standard errors, normal CIs.
//! - [`simbench`] — data-generating processes and the replication benchmark harness.

pub mod datamodel;
pub mod density_ratio;
pub mod drcsa;
mod error;
pub mod inference;
pub mod models;
pub mod numkit;
mod optim;
pub mod simbench;

pub use error::{Error, Result};
