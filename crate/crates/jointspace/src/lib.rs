//! Filesystem, file-format and command-line layer over `jointspace-core`.

pub mod audio;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
