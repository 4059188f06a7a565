//! The `srsupm` command-line tool.

pub mod args;
pub mod commands;
pub mod lock;

pub use args::Cli;
pub use commands::run;
