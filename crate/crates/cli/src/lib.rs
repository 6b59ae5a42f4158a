//! Command-line front end: dataset generation and corruption, training,
//! evaluation and report tables.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod overlay;
pub mod plot;
pub mod tables;

pub use args::Cli;
pub use commands::run;
