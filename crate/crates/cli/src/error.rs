use std::error::Error as StdError;
use std::fmt;
use std::path::Path;

use intensity_core::adaptive::AdaptError;
use intensity_core::ingest::{FeatureFileError, ManifestError};
use intensity_core::scorer::ScorerError;
use intensity_core::segmentation::SegmentError;
use intensity_core::synth::SynthError;

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, bad input data or a failed check.
    Invalid(String),
    /// A prerequisite stage has not produced its artifact yet.
    StageOrder { stage: String, needs: String, artifact: String },
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::StageOrder { .. } => 1,
            CliError::Io(_) => 2,
        }
    }

    /// Wraps a library error, treating anything caused by I/O as an I/O error.
    pub fn from_core<E: StdError + 'static>(context: &str, e: E) -> Self {
        let mut cause: Option<&(dyn StdError + 'static)> = Some(&e);
        while let Some(c) = cause {
            if is_io(c) {
                return CliError::Io(format!("{context}: {e}"));
            }
            cause = c.source();
        }
        CliError::Invalid(format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => f.write_str(m),
            CliError::StageOrder { stage, needs, artifact } => write!(
                f,
                "stage order: `{stage}` needs {artifact} from `{needs}`; run `intensity {needs}` first"
            ),
        }
    }
}

/// Transparent wrappers hide the inner `io::Error` from `source()`, so the
/// known variants are matched directly.
fn is_io(e: &(dyn StdError + 'static)) -> bool {
    if e.is::<std::io::Error>() {
        return true;
    }
    if let Some(x) = e.downcast_ref::<SegmentError>() {
        return matches!(x, SegmentError::Io(_) | SegmentError::Features(FeatureFileError::Io(_)));
    }
    if let Some(x) = e.downcast_ref::<FeatureFileError>() {
        return matches!(x, FeatureFileError::Io(_));
    }
    if let Some(x) = e.downcast_ref::<ManifestError>() {
        return matches!(x, ManifestError::Io { .. });
    }
    if let Some(x) = e.downcast_ref::<SynthError>() {
        return matches!(x, SynthError::Io { .. });
    }
    if let Some(x) = e.downcast_ref::<ScorerError>() {
        return matches!(x, ScorerError::Io(_));
    }
    if let Some(x) = e.downcast_ref::<AdaptError>() {
        return matches!(x, AdaptError::Scorer(ScorerError::Io(_)));
    }
    false
}
