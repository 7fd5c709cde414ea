//! Synthetic scenarios, metrics and experiment orchestration.

pub mod checks;
pub mod experiment;
pub mod metrics;
pub mod pca;
pub mod scenario;
