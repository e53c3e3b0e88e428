//! Experiment harness: configuration, per-seed runs, artifacts and reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod report;
