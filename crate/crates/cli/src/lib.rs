//! Command-line front end of the speech chain toolkit.

pub mod commands;
pub mod config;
