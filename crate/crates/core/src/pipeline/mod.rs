//! Pair registration, sequence chaining, volume export and evaluation runs.

mod config;
mod evaluate;
mod export;
mod pair;
mod run;
mod sequence;

pub use config::{PipelineConfig, ReferencePolicy, CONFIG_KEYS};
pub use evaluate::{evaluate_run, landmark_path, mean_landmark_distance, reference_frame_errors};
pub use export::{
    export_volume, raw_volume_bytes, warp_to_reference, ExportMode, VolumeStack, MANIFEST_FILE,
    RAW_HEADER_FILE, RAW_VOLUME_FILE,
};
pub use pair::{pair_stem, register_pair, trace_csv, PairRegistration, PairStatus};
pub use run::{load_run, save_run, RUN_FILE};
pub use sequence::{compose_to_reference, register_sequence, SequenceRegistration};
