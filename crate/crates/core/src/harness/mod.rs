//! Command-line front end: signal capture, initialization, invariant suites
//! and scheme comparisons.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod verify;

pub use commands::{cmd_experiment, cmd_init, cmd_signals, cmd_verify, InitSummary, SignalsSummary};
pub use config::{ExperimentConfig, Task};
pub use experiment::{run_experiment, ExperimentOutput};
pub use verify::{run_suite, Check, Report, SUITES};
