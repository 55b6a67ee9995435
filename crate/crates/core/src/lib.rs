//! Selection bias and exact post-selection posterior means for the
//! normal-normal treatment selection problem.
//!
//! When the arm with the largest observed mean is picked after an experiment,
//! the ordinary posterior mean of that arm, `E(mu | X)`, ignores the fact that
//! the arm was selected *because* it won. This crate computes the closed-form
//! correction for the exchangeable normal-normal model:
//!
//! * [`model`]: the hierarchical prior and un-truncated posterior means,
//! * [`mvn`]: normal densities and orthant probabilities (1-D quadrature for
//!   equicorrelated covariances, randomized lattice QMC otherwise),
//! * [`truncmvn`]: first moments and marginal densities of a multivariate
//!   normal truncated from above,
//! * [`bias`]: the selection bias, post-selection mean and bias tables,
//! * [`simulate`]: a seeded Monte Carlo harness used as an independent oracle,
//! * [`validate`]: the oracle suite behind `selbias validate`.
//!
//! ```
//! use selbias::{bias, model::ModelParams};
//!
//! let params = ModelParams::from_squared(10, 0.5, 1.0, 2.0).unwrap();
//! let lambda = bias::post_selection_mean(&params, 3.25).unwrap();
//! assert!((lambda - 0.400).abs() < 5e-3);
//! ```

pub mod bias;
pub mod error;
pub mod model;
pub mod mvn;
pub mod quad;
pub mod simulate;
pub mod stats;
pub mod truncmvn;
pub mod validate;

pub use error::{Error, Result};
