//! Library side of the `pcic` binary, so integration tests can drive the
//! same code paths.

pub mod commands;
pub mod config;
