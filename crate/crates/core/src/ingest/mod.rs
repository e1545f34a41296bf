//! Reading action-unit traces, dataset manifests and feature files.

mod features;
mod manifest;
mod trace;

pub use features::{FeatureFileError, FeatureMatrix};
pub use manifest::{
    load_manifest, load_manifest_file, Batch, DatasetManifest, FrameSpan, ManifestError,
    Recording, RecordingRef, SubjectEntry,
};
pub use trace::{parse_au_trace, AuTrace, TraceError, MAX_FRAME_GAP};
