//! Curvature-guided privacy for published image datasets.

pub mod adversary;
pub mod baselines;
pub mod bilevel;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod netkit;
pub mod obfuscator;
pub mod pipeline;
pub mod rng;
pub mod rvae;

pub use error::{Error, Result};
