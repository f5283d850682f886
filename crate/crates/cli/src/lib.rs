//! Command-line orchestration: corpus generation, training, ablations,
//! decoding, evaluation, benchmarking and data planning.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use artifacts::{Outcome, Summary};
pub use commands::*;
pub use config::RunConfig;
