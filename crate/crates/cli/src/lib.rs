//! Command-line plumbing for the segmentation pipeline.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_infer, cmd_synth, cmd_train};
pub use config::{Overrides, RunConfig};
