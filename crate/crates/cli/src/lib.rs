//! Workflows behind the `portrait` command and the inference service.

pub mod commands;
pub mod service;

pub use commands::{run, Cli, Command, ExitCode};
