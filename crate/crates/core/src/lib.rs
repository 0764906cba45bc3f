//! Federated continual learning simulator.
//!
//! Clients train a shared model on a stream of tasks; their local objective
//! can mix cross-entropy with distillation from the client's previous model
//! and from the current server model. The server aggregates with a weighted
//! parameter average, and a metrics ledger tracks accuracy and forgetting of
//! every model on a common test set.

pub mod config;
pub mod continual;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod report;
pub mod seed;
pub mod tensor;

pub use config::{preset, ScenarioConfig, PRESETS};
pub use error::{Error, Result};
pub use federation::{run_experiment, sweep, Experiment, Federation, RunOptions};
pub use metrics::MetricsLedger;
pub use tensor::{LogitBatch, Tensor};
