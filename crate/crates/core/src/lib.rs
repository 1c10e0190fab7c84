//! Download-rate model, burst-departure bounds and a piece-level simulator
//! for small swarms whose leechers share one upload capacity.

pub mod batch;
pub mod burst;
pub mod error;
pub mod metrics;
pub mod rate_model;
pub mod sim;
pub mod validation;

pub use error::{Error, Result};
