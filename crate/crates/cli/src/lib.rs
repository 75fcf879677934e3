//! Command-line workflows over the matching engine: synthetic data,
//! training, evaluation, single-pair matching and attention explanations.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
