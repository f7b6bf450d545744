//! Experiment harness.

pub mod config;
pub mod experiment;
pub mod report;
