//! Library side of the `gapcast` command line tool.

pub mod config;
pub mod commands;
pub mod pipeline;
