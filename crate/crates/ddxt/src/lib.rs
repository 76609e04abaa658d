//! File formats, CSV ingestion, reports and the command pipeline around
//! `ddxt-core`.

pub mod cache;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod records;
pub mod report;
pub mod vocab_file;

pub use error::{Error, Result};
