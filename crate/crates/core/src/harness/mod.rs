//! End-to-end experiments: configuration, the training loop, evaluation,
//! the flatness probe, artifact I/O and the CLI.

pub mod cli;
pub mod config;
pub mod io;
pub mod metrics;
pub mod probe;
pub mod train;

pub use config::{ExperimentConfig, Variant};
pub use metrics::{evaluate, MetricsReport};
pub use probe::{flatness_probe, FlatnessProbeResult, ProbeAccuracy};
pub use train::{train, train_on, TrainOutcome};
