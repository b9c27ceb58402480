//! Library surface of the `dbkd` CLI: configuration, the staged
//! pipeline, and plot rendering. The binary in main.rs is a thin clap
//! wrapper; the acceptance suite drives these modules directly.

pub mod config;
pub mod pipeline;
pub mod plot;
