//! Synthetic data, metrics, persistence, and the experiment pipeline.

pub mod config;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod results;
pub mod synth;
