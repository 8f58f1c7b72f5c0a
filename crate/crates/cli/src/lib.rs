//! Experiment runner behind the `cossl` binary.

pub mod compare;
pub mod config_io;
pub mod run;

/// Output root when neither `--out` nor `COSSL_OUT` is given.
pub const DEFAULT_OUT: &str = "runs";
