//! File formats, experiment plumbing and the `flowmix` command line on top
//! of `flowmix-core`.
//!
//! - [`model`]: JSON model files (exact flows and trained checkpoints).
//! - [`grammar`]: the text form of composition trees.
//! - [`export`]: CSV tables and PGM heatmaps.
//! - [`experiment`]: loading components, running evaluations, experiment files.
//! - [`cli`]: argument parsing and the subcommands.

pub mod cli;
mod error;
pub mod experiment;
pub mod export;
pub mod grammar;
pub mod model;

pub use error::{AppError, AppResult};
pub use flowmix_core as core;
