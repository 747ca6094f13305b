//! Discrete-event simulation of complete deployments.
//!
//! Flow managers feed series through rings to analytics managers, which
//! filter them through the cache, batch the rest and submit batches to
//! accelerator chips. [`run`] is deterministic; [`live`] runs the same
//! pipeline on threads.

pub mod config;
pub mod engine;
pub mod live;
pub mod metrics;
pub mod reference;

pub use config::{ConfigError, Deployment, MergeOrder, OracleKind, SimConfig, Topology};
pub use engine::{run, run_shared, Event, EventQueue, SimOutput, Simulator};
pub use metrics::{MetricsReport, Percentiles, RunDetail, WindowStats};
