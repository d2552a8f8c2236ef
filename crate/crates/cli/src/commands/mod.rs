//! Subcommand implementations. Each one writes into its own run directory.

pub mod analysis;
pub mod data;
pub mod summary;
pub mod training;
