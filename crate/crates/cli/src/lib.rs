//! Command-line interface and HTTP service over the `schemex` library.

pub mod commands;
pub mod error;
pub mod service;

pub use commands::{run, Cli, Command};
pub use error::Failure;
