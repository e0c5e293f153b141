//! Checks shared by the topical suites and the acceptance gate.
#![allow(dead_code)]

pub mod data;
pub mod diffusion;
pub mod gradients;
pub mod metrics;
