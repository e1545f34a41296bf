//! Normalized emotion intensity from action-unit traces.
//!
//! Each emotion is a list of AU term groups. A frame's intensity is the mean
//! over groups of `sum(AU in group) / sum(subject max of AU in group)`, so a
//! bilateral pair such as `{AU6L, AU6R}` contributes one term. The result is
//! clamped to `[0, 1]`, stored at micro-unit resolution and quantized to the
//! eleven classes `0..=10`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AuTrace;

/// Channels whose subject maximum falls below this are rejected as degenerate.
pub const DEGENERATE_MAX: f64 = 1e-3;

/// Number of intensity classes.
pub const NUM_CLASSES: usize = 11;

/// Intensities are snapped to a grid of `1 / INTENSITY_STEPS` (six decimals, as in the CSV export).
pub const INTENSITY_STEPS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("emotion map `{0}` has no terms")]
    EmptyMap(String),
    #[error("emotion map `{emotion}`: term group {group} is empty")]
    EmptyGroup { emotion: String, group: usize },
    #[error("emotion map `{emotion}`: channel `{channel}` appears in more than one group")]
    SharedChannel { emotion: String, channel: String },
    #[error("subject `{subject_id}`: recording `{video_id}` lacks channel `{channel}`")]
    MissingChannel {
        subject_id: String,
        video_id: String,
        channel: String,
    },
    #[error("subject `{subject_id}`: no valid frames to derive maxima from")]
    NoValidFrames { subject_id: String },
    #[error("subject `{subject_id}`: channel `{channel}` peaks at {max}, below {DEGENERATE_MAX}")]
    DegenerateSubject {
        subject_id: String,
        channel: String,
        max: f64,
    },
    #[error("maxima for subject `{subject_id}` do not cover channel `{channel}`")]
    MaximaMismatch { subject_id: String, channel: String },
    #[error("cannot quantize NaN intensity")]
    NaN,
    #[error("intensity CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Emotion to action-unit term groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionAuMap {
    pub emotion: String,
    pub terms: Vec<Vec<String>>,
}

impl EmotionAuMap {
    /// Happiness: cheek raiser (AU6) and lip corner puller (AU12), both bilateral.
    pub fn happiness() -> Self {
        Self {
            emotion: "happiness".into(),
            terms: vec![
                vec!["AU6L".into(), "AU6R".into()],
                vec!["AU12L".into(), "AU12R".into()],
            ],
        }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.terms.is_empty() {
            return Err(LabelError::EmptyMap(self.emotion.clone()));
        }
        let mut seen = HashSet::new();
        for (g, group) in self.terms.iter().enumerate() {
            if group.is_empty() {
                return Err(LabelError::EmptyGroup {
                    emotion: self.emotion.clone(),
                    group: g,
                });
            }
            for c in group {
                if !seen.insert(c.as_str()) {
                    return Err(LabelError::SharedChannel {
                        emotion: self.emotion.clone(),
                        channel: c.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Mapped channels in group order.
    pub fn channels(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().flatten().map(String::as_str)
    }

    /// Task tags are `<emotion>` or `<emotion>/<variant>`.
    pub fn matches_task(&self, task_tag: &str) -> bool {
        task_tag == self.emotion
            || task_tag
                .strip_prefix(self.emotion.as_str())
                .is_some_and(|rest| rest.starts_with('/'))
    }
}

/// Per-channel maximum activation of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuMaxima {
    pub subject_id: String,
    pub maxima: BTreeMap<String, f64>,
}

impl AuMaxima {
    pub fn get(&self, channel: &str) -> Option<f64> {
        self.maxima.get(channel).copied()
    }
}

/// Maximum of every mapped channel over the valid frames of all `traces`.
pub fn subject_au_maxima<'a>(
    traces: impl IntoIterator<Item = &'a AuTrace>,
    map: &EmotionAuMap,
) -> Result<AuMaxima, LabelError> {
    map.validate()?;
    let mut subject_id = String::new();
    let mut maxima: BTreeMap<String, f64> = map.channels().map(|c| (c.to_string(), 0.0)).collect();
    let mut any_valid = false;
    for trace in traces {
        subject_id.clone_from(&trace.subject_id);
        let cols = map
            .channels()
            .map(|c| {
                trace
                    .channel_index(c)
                    .map(|i| (c, i))
                    .ok_or_else(|| LabelError::MissingChannel {
                        subject_id: trace.subject_id.clone(),
                        video_id: trace.video_id.clone(),
                        channel: c.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for frame in (0..trace.len()).filter(|&f| trace.valid()[f]) {
            any_valid = true;
            for &(name, col) in &cols {
                let m = maxima.get_mut(name).unwrap();
                *m = m.max(trace.value(frame, col));
            }
        }
    }
    if !any_valid {
        return Err(LabelError::NoValidFrames { subject_id });
    }
    check_degenerate(&subject_id, &maxima)?;
    Ok(AuMaxima { subject_id, maxima })
}

fn check_degenerate(subject_id: &str, maxima: &BTreeMap<String, f64>) -> Result<(), LabelError> {
    match maxima.iter().find(|(_, m)| !(**m >= DEGENERATE_MAX)) {
        Some((channel, max)) => Err(LabelError::DegenerateSubject {
            subject_id: subject_id.to_string(),
            channel: channel.clone(),
            max: *max,
        }),
        None => Ok(()),
    }
}

/// Rounds `10 * clamp(x, 0, 1)` to the nearest class, ties away from zero.
pub fn quantize_intensity(x: f64) -> Result<u8, LabelError> {
    if x.is_nan() {
        return Err(LabelError::NaN);
    }
    Ok((x.clamp(0.0, 1.0) * 10.0).round() as u8)
}

fn snap(x: f64) -> f64 {
    // Dividing the integer count yields the same f64 as parsing the decimal text.
    (x * INTENSITY_STEPS).round() / INTENSITY_STEPS
}

/// Per-frame normalized intensity and class label of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    pub subject_id: String,
    pub video_id: String,
    pub first_frame: u64,
    pub intensity: Vec<f64>,
    pub label: Vec<u8>,
    pub valid: Vec<bool>,
}

impl IntensityTrace {
    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# subject_id={}", self.subject_id);
        let _ = writeln!(out, "# video_id={}", self.video_id);
        out.push_str("frame,valid,intensity,label\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{}",
                self.first_frame + i as u64,
                u8::from(self.valid[i]),
                self.intensity[i],
                self.label[i]
            );
        }
        out
    }

    /// Parses the export written by [`IntensityTrace::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, LabelError> {
        let mut t = IntensityTrace {
            subject_id: String::new(),
            video_id: String::new(),
            first_frame: 0,
            intensity: Vec::new(),
            label: Vec::new(),
            valid: Vec::new(),
        };
        let mut header_seen = false;
        let mut expected_frame = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let err = |reason: &str| LabelError::Csv {
                line: n,
                reason: reason.to_string(),
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "subject_id" => t.subject_id = v.trim().to_string(),
                        "video_id" => t.video_id = v.trim().to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                if line.trim() != "frame,valid,intensity,label" {
                    return Err(err("expected header `frame,valid,intensity,label`"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            let frame: u64 = f[0].parse().map_err(|_| err("bad frame index"))?;
            match expected_frame {
                None => t.first_frame = frame,
                Some(e) if e != frame => return Err(err("frames must be consecutive")),
                _ => {}
            }
            expected_frame = Some(frame + 1);
            let valid = match f[1] {
                "0" => false,
                "1" => true,
                _ => return Err(err("valid must be 0 or 1")),
            };
            let x: f64 = f[2].parse().map_err(|_| err("bad intensity"))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(err("intensity outside [0, 1]"));
            }
            let label: u8 = f[3].parse().map_err(|_| err("bad label"))?;
            if label as usize >= NUM_CLASSES {
                return Err(err("label outside 0..=10"));
            }
            t.valid.push(valid);
            t.intensity.push(x);
            t.label.push(label);
        }
        if !header_seen {
            return Err(LabelError::Csv {
                line: 0,
                reason: "missing header".into(),
            });
        }
        Ok(t)
    }
}

/// Applies the normalized labeling scheme to one recording.
pub fn normalize_emotion_intensity(
    trace: &AuTrace,
    maxima: &AuMaxima,
    map: &EmotionAuMap,
) -> Result<IntensityTrace, LabelError> {
    map.validate()?;
    let mut groups = Vec::with_capacity(map.terms.len());
    for group in &map.terms {
        let mut cols = Vec::with_capacity(group.len());
        let mut denom = 0.0;
        for c in group {
            let col = trace
                .channel_index(c)
                .ok_or_else(|| LabelError::MissingChannel {
                    subject_id: trace.subject_id.clone(),
                    video_id: trace.video_id.clone(),
                    channel: c.clone(),
                })?;
            let max = maxima.get(c).ok_or_else(|| LabelError::MaximaMismatch {
                subject_id: maxima.subject_id.clone(),
                channel: c.clone(),
            })?;
            if !(max >= DEGENERATE_MAX) {
                return Err(LabelError::DegenerateSubject {
                    subject_id: maxima.subject_id.clone(),
                    channel: c.clone(),
                    max,
                });
            }
            cols.push(col);
            denom += max;
        }
        groups.push((cols, denom));
    }
    let n = groups.len() as f64;

    let mut intensity = Vec::with_capacity(trace.len());
    let mut label = Vec::with_capacity(trace.len());
    for frame in 0..trace.len() {
        if !trace.valid()[frame] {
            intensity.push(0.0);
            label.push(0);
            continue;
        }
        let mut sum = 0.0;
        for (cols, denom) in &groups {
            let num: f64 = cols.iter().map(|&c| trace.value(frame, c)).sum();
            sum += num / denom;
        }
        let x = snap((sum / n).clamp(0.0, 1.0));
        intensity.push(x);
        label.push(quantize_intensity(x)?);
    }
    Ok(IntensityTrace {
        subject_id: trace.subject_id.clone(),
        video_id: trace.video_id.clone(),
        first_frame: trace.first_frame(),
        intensity,
        label,
        valid: trace.valid().to_vec(),
    })
}

/// Labels every recording of one subject using maxima over those recordings.
pub fn label_subject(
    traces: &[AuTrace],
    map: &EmotionAuMap,
) -> Result<(AuMaxima, Vec<IntensityTrace>), LabelError> {
    let maxima = subject_au_maxima(traces, map)?;
    let labeled = traces
        .iter()
        .map(|t| normalize_emotion_intensity(t, &maxima, map))
        .collect::<Result<_, _>>()?;
    Ok((maxima, labeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn happy_trace(rows: Vec<[f64; 4]>) -> AuTrace {
        let n = rows.len();
        AuTrace::new(
            "s",
            "v",
            ["AU6L", "AU6R", "AU12L", "AU12R"].map(String::from).to_vec(),
            rows.into_iter().map(|r| r.to_vec()).collect(),
            vec![true; n],
        )
        .unwrap()
    }

    fn maxima(pairs: &[(&str, f64)]) -> AuMaxima {
        AuMaxima {
            subject_id: "s".into(),
            maxima: pairs.iter().map(|(c, m)| (c.to_string(), *m)).collect(),
        }
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_intensity(0.37), Ok(4));
        assert_eq!(quantize_intensity(0.05), Ok(1));
        assert_eq!(quantize_intensity(1.0), Ok(10));
        assert_eq!(quantize_intensity(0.0), Ok(0));
        assert_eq!(quantize_intensity(1.7), Ok(10));
        assert_eq!(quantize_intensity(-0.2), Ok(0));
        assert_eq!(quantize_intensity(f64::NAN), Err(LabelError::NaN));
    }

    #[test]
    fn maxima_over_valid_frames_and_recordings() {
        let mut a = happy_trace(vec![[0.55, 0.2, 0.3, 0.1], [0.1, 0.4, 0.2, 0.5]]);
        a.subject_id = "s".into();
        let b = happy_trace(vec![[0.2, 0.2, 0.7, 0.2]]);
        let m = subject_au_maxima([&a, &b], &EmotionAuMap::happiness()).unwrap();
        assert_eq!(m.get("AU6L"), Some(0.55));
        assert_eq!(m.get("AU12L"), Some(0.7));
        assert_eq!(m.get("AU12R"), Some(0.5));

        let masked = AuTrace::new(
            "s",
            "v",
            vec!["AU6L".into(), "AU6R".into(), "AU12L".into(), "AU12R".into()],
            vec![vec![0.9; 4], vec![0.5; 4]],
            vec![false, true],
        )
        .unwrap();
        let m = subject_au_maxima([&masked], &EmotionAuMap::happiness()).unwrap();
        assert_eq!(m.get("AU6L"), Some(0.5));
    }

    #[test]
    fn degenerate_and_missing_channels() {
        let t = happy_trace(vec![[0.0, 0.3, 0.3, 0.3]]);
        assert!(matches!(
            subject_au_maxima([&t], &EmotionAuMap::happiness()),
            Err(LabelError::DegenerateSubject { ref channel, .. }) if channel == "AU6L"
        ));
        let partial = AuTrace::new("s", "v", vec!["AU6L".into()], vec![vec![0.5]], vec![true]).unwrap();
        assert!(matches!(
            subject_au_maxima([&partial], &EmotionAuMap::happiness()),
            Err(LabelError::MissingChannel { .. })
        ));
        let none_valid = AuTrace::new("s", "v", vec!["AU6L".into()], vec![vec![0.5]], vec![false]).unwrap();
        let map = EmotionAuMap {
            emotion: "x".into(),
            terms: vec![vec!["AU6L".into()]],
        };
        assert!(matches!(
            subject_au_maxima([&none_valid], &map),
            Err(LabelError::NoValidFrames { .. })
        ));
    }

    #[test]
    fn map_validation() {
        let mut m = EmotionAuMap::happiness();
        m.terms.push(vec!["AU6L".into()]);
        assert!(matches!(m.validate(), Err(LabelError::SharedChannel { .. })));
        m.terms = vec![vec![]];
        assert!(matches!(m.validate(), Err(LabelError::EmptyGroup { .. })));
        m.terms.clear();
        assert!(matches!(m.validate(), Err(LabelError::EmptyMap(_))));
        let parsed = EmotionAuMap::from_json(r#"{"emotion":"happiness","terms":[["AU6L","AU6R"],["AU12L","AU12R"]]}"#).unwrap();
        assert_eq!(parsed, EmotionAuMap::happiness());
        let h = EmotionAuMap::happiness();
        assert!(h.matches_task("happiness"));
        assert!(h.matches_task("happiness/really_smile"));
        assert!(!h.matches_task("happinessx"));
        assert!(!h.matches_task("sadness/low"));
    }

    #[test]
    fn at_maxima_is_full_intensity() {
        let t = happy_trace(vec![[0.5, 0.45, 0.6, 0.7]]);
        let m = maxima(&[("AU6L", 0.5), ("AU6R", 0.45), ("AU12L", 0.6), ("AU12R", 0.7)]);
        let it = normalize_emotion_intensity(&t, &m, &EmotionAuMap::happiness()).unwrap();
        assert_eq!(it.intensity, [1.0]);
        assert_eq!(it.label, [10]);
    }

    #[test]
    fn hand_evaluated_half_intensity() {
        // (0.25+0.25)/(0.5+0.5)/2 + (0.3+0.3)/(0.6+0.6)/2 = 0.25 + 0.25
        let t = happy_trace(vec![[0.25, 0.25, 0.3, 0.3], [0.0; 4]]);
        let m = maxima(&[("AU6L", 0.5), ("AU6R", 0.5), ("AU12L", 0.6), ("AU12R", 0.6)]);
        let it = normalize_emotion_intensity(&t, &m, &EmotionAuMap::happiness()).unwrap();
        assert_eq!(it.intensity, [0.5, 0.0]);
        assert_eq!(it.label, [5, 0]);
    }

    #[test]
    fn invalid_frames_are_flagged() {
        let t = AuTrace::new(
            "s",
            "v",
            vec!["AU6L".into()],
            vec![vec![0.4], vec![0.0]],
            vec![true, false],
        )
        .unwrap();
        let map = EmotionAuMap {
            emotion: "x".into(),
            terms: vec![vec!["AU6L".into()]],
        };
        let (_, out) = label_subject(&[t], &map).unwrap();
        assert_eq!(out[0].valid, [true, false]);
        assert_eq!(out[0].label, [10, 0]);
        let empty = AuTrace::new("s", "v", vec!["AU6L".into()], vec![], vec![]).unwrap();
        let m = maxima(&[("AU6L", 0.4)]);
        assert!(normalize_emotion_intensity(&empty, &m, &map).unwrap().is_empty());
    }

    #[test]
    fn intensity_csv_round_trip() {
        let t = happy_trace(vec![[0.25, 0.25, 0.3, 0.3], [0.1, 0.2, 0.3, 0.4]]);
        let (_, out) = label_subject(&[t], &EmotionAuMap::happiness()).unwrap();
        let text = out[0].to_csv();
        assert_eq!(IntensityTrace::from_csv(&text).unwrap(), out[0]);
        assert!(IntensityTrace::from_csv("frame,valid,intensity,label\n0,1,0.5,11\n").is_err());
    }

    fn arb_rows() -> impl Strategy<Value = Vec<[f64; 4]>> {
        proptest::collection::vec(proptest::array::uniform4(0.0f64..=1.0), 1..30)
            .prop_map(|mut rows| {
                rows.push([0.8, 0.7, 0.9, 0.6]);
                rows
            })
    }

    proptest! {
        #[test]
        fn quantization_error_bounded(rows in arb_rows()) {
            let (_, out) = label_subject(&[happy_trace(rows)], &EmotionAuMap::happiness()).unwrap();
            for (x, l) in out[0].intensity.iter().zip(&out[0].label) {
                prop_assert!((*l as f64 / 10.0 - x.clamp(0.0, 1.0)).abs() <= 0.05 + 1e-12);
            }
        }

        #[test]
        fn power_of_two_scaling_is_exact(rows in arb_rows(), k in 1u32..4) {
            let c = 0.5f64.powi(k as i32);
            let t = happy_trace(rows);
            let scaled = t.map_values(|_, v| v * c).unwrap();
            let map = EmotionAuMap::happiness();
            let (_, a) = label_subject(&[t], &map).unwrap();
            let (_, b) = label_subject(&[scaled], &map).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn increasing_an_au_never_lowers_intensity(
            rows in arb_rows(), frame in any::<prop::sample::Index>(), ch in 0usize..4, bump in 0.0f64..0.5
        ) {
            let t = happy_trace(rows);
            let map = EmotionAuMap::happiness();
            let m = subject_au_maxima([&t], &map).unwrap();
            let f = frame.index(t.len());
            let bumped = t
                .map_values(|_, v| v)
                .unwrap();
            let mut values = bumped.values().to_vec();
            let w = 4;
            values[f * w + ch] = (values[f * w + ch] + bump).min(1.0);
            let bumped = AuTrace::from_flat("s", "v", t.channels().to_vec(), values, t.valid().to_vec()).unwrap();
            let a = normalize_emotion_intensity(&t, &m, &map).unwrap();
            let b = normalize_emotion_intensity(&bumped, &m, &map).unwrap();
            prop_assert!(b.intensity[f] >= a.intensity[f]);
        }
    }
}
