//! Host-side companion to `sparsevos-core`: file formats, corpus directories,
//! config files, the benchmark harness and SVG reports.

pub mod bench;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod format;
pub mod netpbm;
pub mod plot;

pub use error::{Error, Result};
