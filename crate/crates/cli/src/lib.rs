//! Config-driven harness binding the simulation library into reproducible
//! named experiments with persisted outputs, checksummed manifests and
//! deterministic parallelism.

pub mod config;
pub mod experiments;
pub mod io;
pub mod manifest;
pub mod summary;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::{run_experiment, HarnessError};
pub use manifest::{verify_manifest, RunManifest, VerifyStatus};
pub use summary::emit_summary;
