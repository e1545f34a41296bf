use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

/// Frame gaps wider than this are rejected instead of being filled with masked rows.
pub const MAX_FRAME_GAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("document has no header row")]
    MissingHeader,
    #[error("line {line}: malformed header: {reason}")]
    Header { line: usize, reason: String },
    #[error("line {line}, column {column}: duplicate channel `{name}`")]
    DuplicateChannel {
        line: usize,
        column: usize,
        name: String,
    },
    #[error("line {line}: malformed metadata `{text}`")]
    Metadata { line: usize, text: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column {column}: `{text}` is not a number")]
    NotNumeric {
        line: usize,
        column: usize,
        text: String,
    },
    #[error("line {line}, column {column}: value {value} outside [0, 1]")]
    OutOfRange {
        line: usize,
        column: usize,
        value: f64,
    },
    #[error("line {line}, column {column}: valid flag must be 0 or 1, got `{text}`")]
    ValidFlag {
        line: usize,
        column: usize,
        text: String,
    },
    #[error("line {line}: frame index `{text}` is not a non-negative integer")]
    FrameIndex { line: usize, text: String },
    #[error("line {line}: frame {frame} does not follow frame {previous}")]
    NonMonotoneFrame {
        line: usize,
        frame: u64,
        previous: u64,
    },
    #[error("line {line}: gap of {gap} frames exceeds the limit of {MAX_FRAME_GAP}")]
    FrameGap { line: usize, gap: u64 },
    #[error("trace shape mismatch: {0}")]
    Shape(String),
}

/// Per-frame action-unit activations for one recording.
///
/// Rows are dense: row `i` holds frame `first_frame + i`. Frames where no face
/// was detected keep their slot and are masked out through [`AuTrace::valid`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuTrace {
    pub subject_id: String,
    pub video_id: String,
    pub fps: Option<f64>,
    first_frame: u64,
    channels: Vec<String>,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl AuTrace {
    /// Builds a trace from frame-major rows, checking every invariant.
    pub fn new(
        subject_id: impl Into<String>,
        video_id: impl Into<String>,
        channels: Vec<String>,
        rows: Vec<Vec<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self, TraceError> {
        let width = channels.len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(TraceError::Shape(format!(
                    "row {i} has {} entries, expected {width}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(subject_id, video_id, channels, values, valid)
    }

    /// Builds a trace from a flat frame-major value buffer.
    pub fn from_flat(
        subject_id: impl Into<String>,
        video_id: impl Into<String>,
        channels: Vec<String>,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, TraceError> {
        let width = channels.len();
        if width == 0 {
            return Err(TraceError::Shape("no channels".into()));
        }
        let mut seen = HashSet::new();
        for name in &channels {
            if !seen.insert(name.as_str()) {
                return Err(TraceError::Shape(format!("duplicate channel `{name}`")));
            }
        }
        if values.len() != valid.len() * width {
            return Err(TraceError::Shape(format!(
                "{} values for {} frames of {width} channels",
                values.len(),
                valid.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(TraceError::Shape(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            video_id: video_id.into(),
            fps: None,
            first_frame: 0,
            channels,
            values,
            valid,
        })
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = Some(fps);
        self
    }

    pub fn with_first_frame(mut self, first_frame: u64) -> Self {
        self.first_frame = first_frame;
        self
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn first_frame(&self) -> u64 {
        self.first_frame
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        let w = self.channels.len();
        &self.values[frame * w..(frame + 1) * w]
    }

    pub fn value(&self, frame: usize, channel: usize) -> f64 {
        self.values[frame * self.channels.len() + channel]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Applies `f` to every stored activation, re-validating the unit-interval bound.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Result<Self, TraceError> {
        let w = self.channels.len();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| f(i % w, *v))
            .collect();
        let mut out = Self::from_flat(
            self.subject_id.clone(),
            self.video_id.clone(),
            self.channels.clone(),
            values,
            self.valid.clone(),
        )?;
        out.fps = self.fps;
        out.first_frame = self.first_frame;
        Ok(out)
    }

    /// Serializes to the AU trace CSV format with six decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.subject_id.is_empty() {
            let _ = writeln!(out, "# subject_id={}", self.subject_id);
        }
        if !self.video_id.is_empty() {
            let _ = writeln!(out, "# video_id={}", self.video_id);
        }
        if let Some(fps) = self.fps {
            let _ = writeln!(out, "# fps={fps}");
        }
        if self.is_empty() && self.first_frame != 0 {
            let _ = writeln!(out, "# first_frame={}", self.first_frame);
        }
        out.push_str("frame,valid");
        for c in &self.channels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(
                out,
                "{},{}",
                self.first_frame + i as u64,
                u8::from(self.valid[i])
            );
            for v in self.row(i) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Parses the AU trace CSV format.
///
/// Leading `# key=value` lines carry optional `subject_id`, `video_id` and `fps`
/// metadata. The header is `frame,valid,<channels...>`; when the `valid` column
/// is absent every frame is treated as valid. Skipped frame indices are filled
/// with zero rows masked invalid.
pub fn parse_au_trace(text: &str) -> Result<AuTrace, TraceError> {
    let mut subject_id = String::new();
    let mut video_id = String::new();
    let mut fps = None;
    let mut declared_first = None;

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let (header_line, header) = loop {
        let Some((n, line)) = lines.next() else {
            return Err(TraceError::MissingHeader);
        };
        if line.trim().is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            let bad = || TraceError::Metadata {
                line: n,
                text: line.to_string(),
            };
            let (key, value) = meta.split_once('=').ok_or_else(bad)?;
            let value = value.trim();
            match key.trim() {
                "subject_id" => subject_id = value.to_string(),
                "video_id" => video_id = value.to_string(),
                "fps" => {
                    let f: f64 = value.parse().map_err(|_| bad())?;
                    if !(f.is_finite() && f > 0.0) {
                        return Err(bad());
                    }
                    fps = Some(f);
                }
                "first_frame" => declared_first = Some(value.parse().map_err(|_| bad())?),
                _ => {}
            }
            continue;
        }
        break (n, line);
    };

    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.first() != Some(&"frame") {
        return Err(TraceError::Header {
            line: header_line,
            reason: "first column must be `frame`".into(),
        });
    }
    let has_valid = names.get(1) == Some(&"valid");
    let first_channel = if has_valid { 2 } else { 1 };
    let channel_names = &names[first_channel..];
    if channel_names.is_empty() {
        return Err(TraceError::Header {
            line: header_line,
            reason: "no action-unit columns".into(),
        });
    }
    let mut seen = HashSet::new();
    for (j, name) in channel_names.iter().enumerate() {
        if name.is_empty() {
            return Err(TraceError::Header {
                line: header_line,
                reason: format!("empty column name at column {}", first_channel + j + 1),
            });
        }
        if *name == "valid" || *name == "frame" || !seen.insert(*name) {
            return Err(TraceError::DuplicateChannel {
                line: header_line,
                column: first_channel + j + 1,
                name: name.to_string(),
            });
        }
    }
    let channels: Vec<String> = channel_names.iter().map(|s| s.to_string()).collect();
    let width = channels.len();

    let mut values = Vec::new();
    let mut valid = Vec::new();
    let mut first_frame = None;
    let mut previous: Option<u64> = None;
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(TraceError::FieldCount {
                line: n,
                expected: names.len(),
                found: fields.len(),
            });
        }
        let frame: u64 = fields[0].parse().map_err(|_| TraceError::FrameIndex {
            line: n,
            text: fields[0].to_string(),
        })?;
        if let Some(prev) = previous {
            if frame <= prev {
                return Err(TraceError::NonMonotoneFrame {
                    line: n,
                    frame,
                    previous: prev,
                });
            }
            let gap = frame - prev - 1;
            if gap > MAX_FRAME_GAP {
                return Err(TraceError::FrameGap { line: n, gap });
            }
            for _ in 0..gap {
                values.extend(std::iter::repeat_n(0.0, width));
                valid.push(false);
            }
        } else {
            first_frame = Some(frame);
        }
        previous = Some(frame);

        let is_valid = if has_valid {
            match fields[1] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(TraceError::ValidFlag {
                        line: n,
                        column: 2,
                        text: other.to_string(),
                    })
                }
            }
        } else {
            true
        };
        for (j, cell) in fields[first_channel..].iter().enumerate() {
            let column = first_channel + j + 1;
            let v: f64 = cell.parse().map_err(|_| TraceError::NotNumeric {
                line: n,
                column,
                text: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(TraceError::NotNumeric {
                    line: n,
                    column,
                    text: cell.to_string(),
                });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(TraceError::OutOfRange {
                    line: n,
                    column,
                    value: v,
                });
            }
            values.push(v);
        }
        valid.push(is_valid);
    }

    Ok(AuTrace {
        subject_id,
        video_id,
        fps,
        first_frame: first_frame.or(declared_first).unwrap_or(0),
        channels,
        values,
        valid,
    })
}
