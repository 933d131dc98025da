//! Batch frontend: `simulate`, `triangulate`, `refine`, `fit`, `track` and
//! `eval`, each writing its outputs plus a `manifest.json` into `--output`.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, ErrorRecord};
pub use manifest::RunManifest;
