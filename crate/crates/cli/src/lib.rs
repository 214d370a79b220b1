//! Library side of the `u2ut` command-line tool: config parsing, the
//! pipeline glue between core modules, and the command implementations.

pub mod commands;
pub mod config;
pub mod pipeline;
