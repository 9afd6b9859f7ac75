//! Multi-turn disaggregated LLM serving simulator and append-prefill router.

pub mod costmodel;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod routing;
pub mod simulator;
pub mod sweep;
pub mod workload;

pub use error::{Error, Result};
