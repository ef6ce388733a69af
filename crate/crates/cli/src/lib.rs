//! Library view of the command-line crate, so integration tests can drive
//! the same config parsing and pipeline code the binary uses.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod transfer;
