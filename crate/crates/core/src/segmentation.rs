//! Fixed-length overlapping windows over labeled recordings.
//!
//! Windows tile each maximal run of valid frames from the run start, advancing
//! by `stride`. A window is labeled with the class of its last frame.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::ingest::{AuTrace, Batch, DatasetManifest, FeatureFileError, FeatureMatrix};
use crate::labeling::{EmotionAuMap, IntensityTrace, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("recording `{subject_id}/{video_id}`: {frames} labeled frames but {feature_rows} feature rows")]
    LengthMismatch {
        subject_id: String,
        video_id: String,
        frames: usize,
        feature_rows: usize,
    },
    #[error("recording `{subject_id}/{video_id}`: feature width {found} differs from {expected}")]
    WidthMismatch {
        subject_id: String,
        video_id: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite feature in recording `{subject_id}/{video_id}`")]
    NonFinite { subject_id: String, video_id: String },
    #[error("window length and stride must be at least 1")]
    BadParams,
    #[error("a split needs at least 2 subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("trace `{video_id}` lacks channel `{channel}`")]
    MissingChannel { video_id: String, channel: String },
    #[error("dataset export: {0}")]
    Format(String),
    #[error(transparent)]
    Features(#[from] FeatureFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowParams {
    /// Frames per window (`T`).
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            length: 16,
            stride: 6,
        }
    }
}

/// Maximal runs of `true` in a validity mask.
pub fn valid_runs(valid: &[bool]) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in valid.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..valid.len());
    }
    runs
}

/// Number of windows a run of `run_len` valid frames yields.
pub fn windows_in_run(run_len: usize, length: usize, stride: usize) -> usize {
    if run_len < length || length == 0 || stride == 0 {
        0
    } else {
        (run_len - length) / stride + 1
    }
}

/// Start frames of every window that fits inside a run of valid frames.
pub fn segment_windows(valid: &[bool], length: usize, stride: usize) -> Vec<usize> {
    if length == 0 || stride == 0 {
        return Vec::new();
    }
    valid_runs(valid)
        .into_iter()
        .flat_map(|run| {
            let n = windows_in_run(run.len(), length, stride);
            (0..n).map(move |k| run.start + k * stride)
        })
        .collect()
}

/// One window of a recording.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub subject_id: String,
    pub video_id: String,
    pub start: usize,
    pub label: u8,
    pub augmented: bool,
}

impl WindowSpec {
    pub fn key(&self) -> (&str, &str, usize) {
        (&self.subject_id, &self.video_id, self.start)
    }
}

/// Windows and their `T × D` feature matrices (flattened, frame-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDataset {
    pub params: WindowParams,
    pub dim: usize,
    pub provenance: String,
    windows: Vec<WindowSpec>,
    features: Vec<f32>,
}

impl SegmentDataset {
    pub fn new(params: WindowParams, dim: usize, provenance: impl Into<String>) -> Self {
        Self {
            params,
            dim,
            provenance: provenance.into(),
            windows: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_size(&self) -> usize {
        self.params.length * self.dim
    }

    pub fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    pub fn features(&self, i: usize) -> &[f32] {
        let w = self.window_size();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn labels(&self) -> Vec<u8> {
        self.windows.iter().map(|w| w.label).collect()
    }

    /// Appends a window; `features` must hold exactly `T * D` finite values.
    pub fn push(&mut self, window: WindowSpec, features: &[f32]) {
        assert_eq!(features.len(), self.window_size(), "window feature size");
        self.windows.push(window);
        self.features.extend_from_slice(features);
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.windows.iter().map(|w| w.subject_id.as_str()).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for w in &self.windows {
            counts[w.label as usize] += 1;
        }
        counts
    }

    /// Copy containing the windows for which `keep` holds, in order.
    pub fn filter(&self, mut keep: impl FnMut(&WindowSpec) -> bool) -> Self {
        let mut out = Self::new(self.params, self.dim, self.provenance.clone());
        for (i, w) in self.windows.iter().enumerate() {
            if keep(w) {
                out.push(w.clone(), self.features(i));
            }
        }
        out
    }

    /// Writes `dataset.json`, `windows.csv` and one feature file per window.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SegmentError> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir)?;
        let meta = DatasetMeta {
            length: self.params.length,
            stride: self.params.stride,
            dim: self.dim,
            windows: self.len(),
            provenance: self.provenance.clone(),
        };
        fs::write(
            dir.join("dataset.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )?;
        let mut csv = String::from("subject,video,start,label,augmented\n");
        for (i, w) in self.windows.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                w.subject_id,
                w.video_id,
                w.start,
                w.label,
                u8::from(w.augmented)
            );
            let m = FeatureMatrix::new(self.params.length, self.dim, self.features(i).to_vec());
            fs::write(feat_dir.join(format!("{i:06}.bin")), m.to_bytes())?;
        }
        fs::write(dir.join("windows.csv"), csv)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, SegmentError> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)
            .map_err(|e| SegmentError::Format(format!("dataset.json: {e}")))?;
        let params = WindowParams {
            length: meta.length,
            stride: meta.stride,
        };
        let mut out = Self::new(params, meta.dim, meta.provenance);
        let csv = fs::read_to_string(dir.join("windows.csv"))?;
        let mut lines = csv.lines();
        if lines.next() != Some("subject,video,start,label,augmented") {
            return Err(SegmentError::Format("windows.csv header".into()));
        }
        for (i, line) in lines.enumerate() {
            let bad = || SegmentError::Format(format!("windows.csv row {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let label: u8 = f[3].parse().map_err(|_| bad())?;
            if label as usize >= NUM_CLASSES {
                return Err(bad());
            }
            let window = WindowSpec {
                subject_id: f[0].to_string(),
                video_id: f[1].to_string(),
                start: f[2].parse().map_err(|_| bad())?,
                label,
                augmented: match f[4] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            };
            let m = FeatureMatrix::from_bytes(&fs::read(dir.join("features").join(format!("{i:06}.bin")))?)?;
            if m.rows != params.length || m.cols != meta.dim {
                return Err(SegmentError::Format(format!(
                    "window {i}: feature file is {}x{}, expected {}x{}",
                    m.rows, m.cols, params.length, meta.dim
                )));
            }
            out.push(window, &m.data);
        }
        if out.len() != meta.windows {
            return Err(SegmentError::Format(format!(
                "dataset.json declares {} windows, windows.csv has {}",
                meta.windows,
                out.len()
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    length: usize,
    stride: usize,
    dim: usize,
    windows: usize,
    provenance: String,
}

/// Per-frame features of the mapped AU channels, in map order.
pub fn au_features(trace: &AuTrace, map: &EmotionAuMap) -> Result<FeatureMatrix, SegmentError> {
    let cols = map
        .channels()
        .map(|c| {
            trace.channel_index(c).ok_or_else(|| SegmentError::MissingChannel {
                video_id: trace.video_id.clone(),
                channel: c.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut data = Vec::with_capacity(trace.len() * cols.len());
    for f in 0..trace.len() {
        data.extend(cols.iter().map(|&c| trace.value(f, c) as f32));
    }
    Ok(FeatureMatrix::new(trace.len(), cols.len(), data))
}

/// A labeled recording ready for windowing.
#[derive(Debug, Clone, Copy)]
pub struct LabeledRecording<'a> {
    pub intensity: &'a IntensityTrace,
    pub features: &'a FeatureMatrix,
}

/// Windows every recording and gathers the feature slices.
pub fn build_dataset(
    recordings: &[LabeledRecording<'_>],
    params: WindowParams,
    provenance: &str,
    exec: Exec,
) -> Result<SegmentDataset, SegmentError> {
    if params.length == 0 || params.stride == 0 {
        return Err(SegmentError::BadParams);
    }
    let dim = recordings.first().map_or(0, |r| r.features.cols);
    let parts = exec.try_map(recordings, |rec| {
        let it = rec.intensity;
        if rec.features.rows != it.len() {
            return Err(SegmentError::LengthMismatch {
                subject_id: it.subject_id.clone(),
                video_id: it.video_id.clone(),
                frames: it.len(),
                feature_rows: rec.features.rows,
            });
        }
        if rec.features.cols != dim {
            return Err(SegmentError::WidthMismatch {
                subject_id: it.subject_id.clone(),
                video_id: it.video_id.clone(),
                expected: dim,
                found: rec.features.cols,
            });
        }
        if rec.features.data.iter().any(|v| !v.is_finite()) {
            return Err(SegmentError::NonFinite {
                subject_id: it.subject_id.clone(),
                video_id: it.video_id.clone(),
            });
        }
        let mut part = SegmentDataset::new(params, dim, provenance);
        for start in segment_windows(&it.valid, params.length, params.stride) {
            let last = start + params.length - 1;
            let window = WindowSpec {
                subject_id: it.subject_id.clone(),
                video_id: it.video_id.clone(),
                start,
                label: it.label[last],
                augmented: false,
            };
            part.push(window, &rec.features.data[start * dim..(last + 1) * dim]);
        }
        Ok(part)
    })?;
    let mut out = SegmentDataset::new(params, dim, provenance);
    for part in parts {
        out.windows.extend(part.windows);
        out.features.extend(part.features);
    }
    Ok(out)
}

/// Subject ids assigned to each side of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl SubjectSplit {
    /// Partitions sorted subject ids with a seeded shuffle; `round(fraction * n)`
    /// subjects (kept within `1..n`) go to training.
    pub fn plan(
        subjects: impl IntoIterator<Item = impl Into<String>>,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self, SegmentError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(SegmentError::BadFraction(train_fraction));
        }
        let mut ids: Vec<String> = subjects.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        let n = ids.len();
        if n < 2 {
            return Err(SegmentError::TooFewSubjects(n));
        }
        let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let mut train = ids[..k].to_vec();
        let mut val = ids[k..].to_vec();
        train.sort();
        val.sort();
        Ok(Self { train, val })
    }

    /// Training subjects come from the short held-intensity batch, validation
    /// subjects from the long neutral-peak-neutral batch.
    pub fn by_batch(manifest: &DatasetManifest) -> Self {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for s in &manifest.subjects {
            if s.recordings.iter().any(|r| r.batch == Batch::One) {
                val.push(s.subject_id.clone());
            } else {
                train.push(s.subject_id.clone());
            }
        }
        train.sort();
        val.sort();
        Self { train, val }
    }

    pub fn apply(&self, dataset: &SegmentDataset) -> (SegmentDataset, SegmentDataset) {
        let train: HashSet<&str> = self.train.iter().map(String::as_str).collect();
        let val: HashSet<&str> = self.val.iter().map(String::as_str).collect();
        (
            dataset.filter(|w| train.contains(w.subject_id.as_str())),
            dataset.filter(|w| val.contains(w.subject_id.as_str())),
        )
    }
}

/// Splits a dataset by subject (never by window).
pub fn split_by_subject(
    dataset: &SegmentDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SegmentDataset, SegmentDataset), SegmentError> {
    let split = SubjectSplit::plan(dataset.subjects(), train_fraction, seed)?;
    Ok(split.apply(dataset))
}
