//! Configuration and command implementations behind the `msn` binary.

pub mod commands;
pub mod config;
