//! Balanced multi-modal learning for regression at desk scale.
//!
//! Four modality encoders feed a fusion head that regresses 3D poses.
//! Per-batch modality contributions are scored with exact Shapley values
//! over the 16-coalition lattice using a Pearson-correlation profit, and
//! an adaptive weight constraint (AWC) loss, weighted by the diagonal
//! Fisher information, slows dominant encoders during an early learning
//! window so weaker modalities are not suppressed.

pub mod balance;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod report;
pub mod shapley;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
