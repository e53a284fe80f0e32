//! Command-line application: configuration, checkpoints, manifests and the
//! subcommands.

mod checkpoint;
pub mod commands;
mod config;
mod manifest;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{DataConfig, FinetuneConfig, RunConfig, OUTPUT_ROOT_ENV};
pub use manifest::{Column, Manifest, ManifestRow};
