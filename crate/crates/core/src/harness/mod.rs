//! Training loop, optimiser and run configuration.

mod adamw;
mod config;
mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use config::{default_widths, DataSource, RunConfig};
pub use train::{
    checkpoint_path, overlap_curves, train, TrainOutcome, CONFIG_FILE, FINAL_CHECKPOINT, METRICS_FILE, OVERLAP_FILE,
};
