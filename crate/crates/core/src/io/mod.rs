//! Persistence and external formats: checkpoints, dataset manifests and run
//! configuration.

mod checkpoint;
mod config;
mod manifest;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, is_optional_param, read_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, CheckpointMeta, LoadReport, MAGIC, VERSION,
};
pub use config::{RunConfig, SEED_ENV};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
