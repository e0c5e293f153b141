//! Dual-branch, learned-variance diffusion for MRI-guided low-dose PET
//! enhancement, with the data simulation, evaluation, volume fusion and
//! representation-analysis tooling around it.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod sampling;
pub mod tensor_util;
pub mod training;

pub use error::{Error, Result};
