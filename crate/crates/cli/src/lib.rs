//! Command implementations behind the `hytrec` binary.

pub mod commands;
pub mod config;

pub use commands::{run, Command, Outcome};
pub use config::RunConfig;
