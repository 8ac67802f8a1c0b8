//! Persistence: run configs, checkpoints, metrics, figure tables.

pub mod checkpoint;
pub mod config;
pub mod figures;
pub mod metrics;

pub use checkpoint::{load as load_checkpoint, Checkpoint, LoadedCheckpoint};
pub use config::{Precision, RunConfig};
