//! Deterministic, data-parallel evolutionary reinforcement learning on CPUs.

pub mod cli;
pub mod ec;
pub mod env;
pub mod error;
pub mod exec;
pub mod net;
pub mod rl;
pub mod workflow;

pub use error::{Error, Result};
