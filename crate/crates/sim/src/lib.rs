//! Deterministic discrete-event simulator for semantic explanation caching
//! at the edge: device fleets, synthetic workloads, baselines, ablations and
//! parameter sweeps.

pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod sweep;
pub mod workload;

pub use config::{Ablation, Mode, Scenario, SimConfig};
pub use engine::{run_seeds, run_simulation, RunOptions, RunOutput};
pub use error::{Result, SimError};
pub use metrics::{MetricsReport, RequestRecord, Source};
pub use sweep::{run_sweep, Experiment, SweepRow};
