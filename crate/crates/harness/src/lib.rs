//! Experiment harness: scenario configs, metrics over simulator event logs,
//! the on-path FEC what-if comparison and latency-dataset feasibility
//! analysis.

pub mod config;
pub mod feasibility;
pub mod metrics;
pub mod scenario;
pub mod whatif;

pub use config::ScenarioConfig;
pub use metrics::MetricsReport;
pub use scenario::{run_scenario, RunOutput, World};
