//! Neural solver for stochastic mean-field games.
//!
//! A value network `phi(x, t)` and a generator `G(z, t)` are trained
//! against each other: the generator pushes the initial density forward in
//! time, and the value network is penalised wherever it violates the
//! Hamilton-Jacobi-Bellman equation along the generated paths. Derivatives
//! in `x` and `t`, including the Laplacian, come from [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod environments;
pub mod error;
pub mod networks;
pub mod run;
pub mod trainer;
pub mod validation;

pub use error::{Error, Result};
