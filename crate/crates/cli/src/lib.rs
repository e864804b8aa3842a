//! Run configuration, checkpoints and subcommand dispatch for the `stuffml`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
