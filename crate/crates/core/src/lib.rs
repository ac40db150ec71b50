//! Mesoscopic dynamics learning toolkit.
//!
//! - [`spectral`]: periodic Fourier transforms and operators;
//! - [`pde`]: semi-implicit reference solvers for Allen-Cahn and KdV;
//! - [`chain`]: FPUT/FENE particle chains and coarse-graining;
//! - [`dataset`]: initial conditions, trajectory files, splits;
//! - [`autodiff`]: reverse-mode AD with double backward, MLPs, Adam;
//! - [`onsager`]: the constrained spectral Onsager model;
//! - [`training`]: K-step loss, training loop, metrics;
//! - [`diagnostics`]: potential traces, fits, step-size and constraint checks.

pub mod autodiff;
pub mod chain;
pub mod checksum;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod onsager;
pub mod pde;
pub mod rng;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
