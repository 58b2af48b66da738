//! Experiment orchestration: configs, runs, sweeps, metrics and t-SNE export.

pub mod config;
pub mod data;
pub mod metrics;
pub mod run;
pub mod sweep;
pub mod tsne;
