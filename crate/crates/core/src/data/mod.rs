//! Dataset ingestion: recording files, dataset manifests, subject splits,
//! the clip cache and the synthetic gait generator.

mod cache;
mod manifest;
mod recording;
mod splits;
mod synthetic;

pub use cache::{cache_key, load_dataset, ClipCache, LoadedDataset, CACHE_VERSION};
pub use manifest::{ClassSummary, DatasetManifest, RecordingEntry};
pub use recording::{load_recording, parse_recording, write_recording, RECORDING_HEADER};
pub use splits::{
    builtin_split, builtin_split_names, carve_validation, load_split, load_split_with_validation, parse_split, resolve_split,
    split_to_json,
};
pub use synthetic::{generate_synthetic, SyntheticClass, SyntheticDataset, SyntheticGaitSpec, SYNTHETIC_FPS};
