//! Particle-level laboratory for mean-field optimal control.
//!
//! The crate builds a full experiment chain on uniform N-particle
//! ensembles: model validation, exact Wasserstein geometry, the lifted
//! calculus of law-invariant functionals, static first-order (KKT)
//! solves, Riccati-based decay certificates, dynamic Pontryagin solves
//! and turnpike envelope reports.

pub mod assignment;
pub mod config;
pub mod error;
pub mod io;
pub mod lift;
pub mod linalg;
pub mod matrix_eq;
pub mod measure;
pub mod model;
pub mod pipeline;
pub mod dynamics;
pub mod spectral;
pub mod static_kkt;
pub mod tolerances;
pub mod turnpike;

pub use error::{Error, Result};
