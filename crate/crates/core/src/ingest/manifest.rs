use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::{parse_au_trace, AuTrace, TraceError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest schema violation: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("duplicate subject_id `{0}`")]
    DuplicateSubject(String),
    #[error("duplicate recording `{video_id}` for subject `{subject_id}`")]
    DuplicateRecording { subject_id: String, video_id: String },
    #[error("recording `{subject_id}/{video_id}`: {field} file not found: {}", path.display())]
    DanglingPath {
        subject_id: String,
        video_id: String,
        field: &'static str,
        path: PathBuf,
    },
    #[error("recording `{subject_id}/{video_id}`: neutral_span [{start}, {end}) outside 0..{frames}")]
    NeutralSpan {
        subject_id: String,
        video_id: String,
        start: u64,
        end: u64,
        frames: usize,
    },
    #[error("recording `{subject_id}/{video_id}`: {source}")]
    Trace {
        subject_id: String,
        video_id: String,
        #[source]
        source: TraceError,
    },
    #[error("reading {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Collection batch a recording belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Batch {
    /// Long neutral-peak-neutral recordings.
    One,
    /// Short recordings at several held intensities.
    Two,
}

impl TryFrom<u8> for Batch {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Batch::One),
            2 => Ok(Batch::Two),
            other => Err(format!("batch must be 1 or 2, got {other}")),
        }
    }
}

impl From<Batch> for u8 {
    fn from(b: Batch) -> u8 {
        match b {
            Batch::One => 1,
            Batch::Two => 2,
        }
    }
}

/// Half-open frame range `[start, end)` in row units of the recording's trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct FrameSpan {
    pub start: u64,
    pub end: u64,
}

impl From<[u64; 2]> for FrameSpan {
    fn from([start, end]: [u64; 2]) -> Self {
        Self { start, end }
    }
}

impl From<FrameSpan> for [u64; 2] {
    fn from(s: FrameSpan) -> Self {
        [s.start, s.end]
    }
}

impl FrameSpan {
    pub fn contains_range(&self, start: usize, len: usize) -> bool {
        start as u64 >= self.start && (start + len) as u64 <= self.end
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recording {
    pub video_id: String,
    pub trace_path: PathBuf,
    #[serde(default)]
    pub features_path: Option<PathBuf>,
    pub task_tag: String,
    #[serde(default)]
    pub neutral_span: Option<FrameSpan>,
    pub batch: Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub recordings: Vec<Recording>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
}

/// A recording paired with its owning subject.
#[derive(Debug, Clone, Copy)]
pub struct RecordingRef<'a> {
    pub subject_id: &'a str,
    pub recording: &'a Recording,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// All recordings in manifest order.
    pub fn recordings(&self) -> impl Iterator<Item = RecordingRef<'_>> {
        self.subjects.iter().flat_map(|s| {
            s.recordings.iter().map(move |r| RecordingRef {
                subject_id: &s.subject_id,
                recording: r,
            })
        })
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn recording(&self, subject_id: &str, video_id: &str) -> Option<&Recording> {
        self.subject(subject_id)?
            .recordings
            .iter()
            .find(|r| r.video_id == video_id)
    }

    /// Loads the AU trace of one recording, stamping it with manifest ids.
    pub fn load_trace(&self, subject_id: &str, rec: &Recording) -> Result<AuTrace, ManifestError> {
        let text = fs::read_to_string(&rec.trace_path).map_err(|source| ManifestError::Io {
            path: rec.trace_path.clone(),
            source,
        })?;
        let mut trace = parse_au_trace(&text).map_err(|source| ManifestError::Trace {
            subject_id: subject_id.to_string(),
            video_id: rec.video_id.clone(),
            source,
        })?;
        trace.subject_id = subject_id.to_string();
        trace.video_id = rec.video_id.clone();
        Ok(trace)
    }
}

/// Parses and validates a manifest document.
///
/// Relative paths are resolved against `base_dir`. Trace files must exist and
/// are parsed so that `neutral_span` can be checked against the frame count.
pub fn load_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest, ManifestError> {
    let mut manifest: DatasetManifest = serde_json::from_str(text)?;

    let mut subjects = HashSet::new();
    for s in &manifest.subjects {
        if !subjects.insert(s.subject_id.as_str()) {
            return Err(ManifestError::DuplicateSubject(s.subject_id.clone()));
        }
        let mut videos = HashSet::new();
        for r in &s.recordings {
            if !videos.insert(r.video_id.as_str()) {
                return Err(ManifestError::DuplicateRecording {
                    subject_id: s.subject_id.clone(),
                    video_id: r.video_id.clone(),
                });
            }
        }
    }

    for s in &mut manifest.subjects {
        for r in &mut s.recordings {
            r.trace_path = base_dir.join(&r.trace_path);
            if let Some(p) = &mut r.features_path {
                *p = base_dir.join(&*p);
            }
            let dangling = |field, path: &Path| ManifestError::DanglingPath {
                subject_id: s.subject_id.clone(),
                video_id: r.video_id.clone(),
                field,
                path: path.to_path_buf(),
            };
            if !r.trace_path.is_file() {
                return Err(dangling("trace_path", &r.trace_path));
            }
            if let Some(p) = &r.features_path {
                if !p.is_file() {
                    return Err(dangling("features_path", p));
                }
            }
        }
    }

    for s in &manifest.subjects {
        for r in &s.recordings {
            if let Some(span) = r.neutral_span {
                let frames = manifest.load_trace(&s.subject_id, r)?.len();
                if span.start >= span.end || span.end > frames as u64 {
                    return Err(ManifestError::NeutralSpan {
                        subject_id: s.subject_id.clone(),
                        video_id: r.video_id.clone(),
                        start: span.start,
                        end: span.end,
                        frames,
                    });
                }
            }
        }
    }
    Ok(manifest)
}

/// Reads and validates a manifest file, resolving paths against its directory.
pub fn load_manifest_file(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_manifest(&text, base)
}
