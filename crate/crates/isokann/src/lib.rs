//! Learning the dominant Koopman eigenfunction of metastable overdamped
//! Langevin diffusions.
//!
//! The central object is the membership function chi: the power iteration
//! chi <- S(K^tau chi) (with S the shift-scale normalization) drives chi
//! toward the subdominant eigenfunction of the transfer operator, whose
//! eigenvalue gives the slowest relaxation rate of the dynamics. K^tau chi
//! is estimated pathwise by Monte Carlo, either plain or under a
//! Girsanov-reweighted steering control derived from the current chi, which
//! concentrates shots where the estimator is noisiest.
//!
//! Module map:
//! - [`sde`]: potential catalog, Euler-Maruyama integrator, path weights
//! - [`model`]: chi approximator (small MLP), Adam, binary checkpoints
//! - [`koopman`]: Monte Carlo estimator, shift-scale, affine fits, rates
//! - [`sampling`]: optimal control, importance-weight diagnostics
//! - [`learn`]: the outer iteration tying the above together
//! - [`oracle`]: grid discretization of the generator for reference answers
//! - [`config`] / [`output`] / [`cli`]: TOML configs, CSV artifacts, commands

pub mod cli;
pub mod config;
pub mod error;
pub mod koopman;
pub mod learn;
pub mod model;
pub mod oracle;
pub mod output;
pub mod rng;
pub mod sampling;
pub mod sde;

pub use error::{Error, Result};
