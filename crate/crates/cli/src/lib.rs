//! Experiment driver behind the `petite` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod table;
