//! Configuration, manifests and subcommands behind the `mixssl` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{cmd_ablate, cmd_finetune, cmd_pretrain, cmd_report, cmd_synth, Options};
pub use config::{Overrides, Preset, RunConfig};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
