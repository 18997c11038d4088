//! Experiment harness: config handling, the single-run, sweep and toy-GAN
//! commands, and their CSV output.

use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod table;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),

    #[error(transparent)]
    Core(#[from] lsvgd_core::Error),
}
