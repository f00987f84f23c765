//! Local identification of the dipole coupling of a controlled N-level
//! quantum system from a single final-time population measurement.
//!
//! The crate simulates the bilinear Schrödinger dynamics, builds three-part
//! Ramsey-style controls that make the measurement sensitive to one dipole
//! entry at a time, computes exact sensitivities, and runs Gauss–Newton
//! inversion on synthetic data.

pub mod averaging;
pub mod error;
pub mod identify;
pub mod propagate;
pub mod qsys;
pub mod ramsey;
pub mod sensitivity;

pub use error::{Error, Result};
