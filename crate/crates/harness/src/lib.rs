//! Experiment harness for the `divebatch` CLI: configuration and presets,
//! multi-trial runs with aggregation, method comparison and the diagnostic
//! suites.

pub mod cli;
pub mod config;
pub mod diagnose;
pub mod experiment;
