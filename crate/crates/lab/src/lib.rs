//! Experiment runner for `reservoir-core`: flat configs, seeded grids,
//! CSV result records and plot tables.

pub mod config;
mod error;
pub mod experiments;
pub mod plot;
pub mod record;

pub use error::{LabError, Result};
