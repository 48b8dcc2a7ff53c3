//! Adaptive noisy 20-questions search over measurement-dependent channels.
//!
//! The crate simulates the information-density query procedure (with and
//! without random termination) and the sorted posterior matching baseline,
//! evaluates the closed-form capacity and decay-rate expressions, and drives
//! Monte Carlo experiments that check the non-asymptotic guarantees.

pub mod analysis;
pub mod channel;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod indexing;
pub mod infodensity;
pub mod sortedpm;
pub mod stats;

pub use error::{Error, Result};

