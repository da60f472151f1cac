//! Quantum-estimation tools for quantum illumination.
//!
//! The crate computes the quantum Fisher information (QFI) of the target
//! reflectivity for signal-idler transmitters given in Schmidt form, builds
//! the locally optimal estimator observable, and simulates the resulting
//! threshold detection test by Monte Carlo.

pub mod error;
pub mod estimator_lab;
pub mod fock_algebra;
pub mod illumination_sim;
pub mod qfi_engine;
pub mod state_models;
pub mod validation;

pub use error::{Error, Result};
