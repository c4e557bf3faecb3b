//! Workbench for in-context-learning equalization of time-varying MIMO
//! channels: channel simulation, reference equalizers, adaptive attention
//! kernels, a small trainable transformer equalizer, and a sweep harness.

pub mod attention;
pub mod baselines;
pub mod channel;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod plot;
pub(crate) mod tensor;

pub use error::{Error, Result};
