//! Numerical laboratory for density-dependent SDEs
//! `dX_t = b(t, X_t, rho_t(X_t)) dt + sqrt(2) dW_t`.
//!
//! The Euler scheme with frozen drift is realized three ways: exact
//! propagation of its law on a grid ([`euler`]), Monte Carlo particles with
//! density feedback ([`particles`]), and an independent finite-volume solver
//! of the nonlinear Fokker-Planck equation ([`fpe`]). [`diagnostics`] turns
//! the resulting densities into certificates and convergence curves.

pub mod diagnostics;
pub mod drift;
pub mod error;
pub mod euler;
mod fft;
pub mod fpe;
pub mod grid;
pub mod heat_kernel;
pub mod initial;
pub mod particles;

pub use drift::{catalog, DriftSpec};
pub use error::{Error, Result};
pub use grid::{GridDensity, GridSpec};
pub use initial::InitialDistribution;
