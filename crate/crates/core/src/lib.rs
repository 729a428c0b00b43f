//! Multi-subject latent spatial factor log-Gaussian Cox process.
//!
//! Count grids of `q` cell types over `N` images are modelled as
//!
//! ```text
//! y_ij(l) ~ Poisson(exp(W_ij(l))),   W_i = 1 alpha_i' + X_i B + v_i A'
//! ```
//!
//! where the `k` columns of `v_i` are independent exponential-kernel Gaussian
//! processes approximated by a meshed (DAG-block) GP. Posterior draws of
//! `(A, phi)` are summarised as marginal and cross-correlation curves.
//!
//! Module map:
//! - [`preprocess`]: point patterns to count grids
//! - [`kernel`]: exponential correlation and the factor cross-covariance
//! - [`meshedgp`]: domain tiling, parent DAG, H/R block factors, densities
//! - [`likelihood`]: log-intensity, Poisson log-likelihood and gradients
//! - [`sampler`]: Metropolis-within-Gibbs engine
//! - [`simulate`]: ground-truth generator and grid coarsening
//! - [`diagnostics`]: curves, WAIC, bulk ESS, split R-hat, MAD
//! - [`io`]: file formats shared with the command-line tool

pub mod diagnostics;
pub mod io;
pub mod kernel;
pub mod likelihood;
pub mod meshedgp;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod simulate;

mod error;

pub use error::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;
