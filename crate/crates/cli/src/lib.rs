//! Library side of the `bonesup` command-line tool.

pub mod commands;
pub mod config;
