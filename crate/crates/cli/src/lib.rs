//! Experiment runner behind the `pocon` binary: versioned TOML configs, run
//! directories with checkpoints and a long-format results table, Markdown
//! and SVG reports, and a verifier for finished runs.

pub mod config;
pub mod report;
pub mod results;
pub mod runner;
pub mod verify;

pub use config::{ConfigError, Method, RunConfig};
pub use runner::{execute, Manifest};
