//! Statistical tests, validation experiments and the `xicoal` command line.

pub mod experiments;
pub mod pool;
pub mod stats;

pub use experiments::{run_experiment, ExperimentSpec, TestReport, TestResult, EXPERIMENTS};
