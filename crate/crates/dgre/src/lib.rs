//! File formats, configuration and the command-line driver around `dgre-core`.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

pub use commands::Run;
pub use config::RunConfig;
pub use error::{CliError, Result};
