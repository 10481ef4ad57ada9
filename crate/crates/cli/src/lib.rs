//! Data ingest, configuration and the command verbs behind the `epidiff`
//! binary.

pub mod bundle;
pub mod config;
pub mod error;
pub mod fit;
pub mod simulate;

pub use error::{CliError, Result};
