//! Experiment driver for the `mbsched` command-line tool.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pbt;
pub mod schema;
