//! Class balancing by dense re-tiling of transitional spans.
//!
//! Rising and falling stretches of a recording pass through every intermediate
//! intensity, so windows ending there show the low- and mid-intensity classes
//! that held expressions rarely produce. Extra windows are drawn from those
//! stretches at a finer stride and only added to classes below the target.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingest::FeatureMatrix;
use crate::labeling::{IntensityTrace, NUM_CLASSES};
use crate::segmentation::{valid_runs, SegmentDataset, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Rising,
    Falling,
}

/// A maximal stretch of steep intensity change inside one valid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpan {
    pub subject_id: String,
    pub video_id: String,
    /// First frame of the span.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    pub direction: Direction,
    /// Mean absolute smoothed slope, intensity per frame.
    pub mean_slope: f64,
}

impl TransitionSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionParams {
    /// Odd width of the centred moving average.
    pub smooth_window: usize,
    pub slope_threshold: f64,
}

impl Default for TransitionParams {
    fn default() -> Self {
        Self {
            smooth_window: 5,
            slope_threshold: 0.01,
        }
    }
}

/// Centred moving average; the window shrinks symmetrically near the ends.
fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let r = window / 2;
    (0..xs.len())
        .map(|i| {
            let k = r.min(i).min(xs.len() - 1 - i);
            let slice = &xs[i - k..=i + k];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

fn slope(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|i| match n {
            0 | 1 => 0.0,
            _ if i == 0 => s[1] - s[0],
            _ if i == n - 1 => s[n - 1] - s[n - 2],
            _ => (s[i + 1] - s[i - 1]) / 2.0,
        })
        .collect()
}

/// Finds maximal runs where the smoothed slope magnitude reaches `slope_threshold`.
///
/// Smoothing and slopes are computed per valid run, so spans never cross a gap.
/// `smooth_window` is rounded up to the next odd number and `slope_threshold`
/// must be positive; non-positive thresholds yield no spans.
pub fn detect_transitions(trace: &IntensityTrace, params: TransitionParams) -> Vec<TransitionSpan> {
    let window = params.smooth_window.max(1) | 1;
    let threshold = params.slope_threshold;
    let mut spans = Vec::new();
    if !(threshold > 0.0) {
        return spans;
    }
    for run in valid_runs(&trace.valid) {
        let s = smooth(&trace.intensity[run.clone()], window);
        let d = slope(&s);
        let mut i = 0;
        while i < d.len() {
            if d[i].abs() < threshold {
                i += 1;
                continue;
            }
            let rising = d[i] > 0.0;
            let j = (i..d.len())
                .find(|&j| d[j].abs() < threshold || (d[j] > 0.0) != rising)
                .unwrap_or(d.len());
            let mean_slope = d[i..j].iter().map(|x| x.abs()).sum::<f64>() / (j - i) as f64;
            spans.push(TransitionSpan {
                subject_id: trace.subject_id.clone(),
                video_id: trace.video_id.clone(),
                start: run.start + i,
                end: run.start + j,
                direction: if rising {
                    Direction::Rising
                } else {
                    Direction::Falling
                },
                mean_slope,
            });
            i = j;
        }
    }
    spans
}

/// How many windows per class to aim for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceTarget {
    /// Fill every class up to the current largest class.
    MatchLargest,
    Count(usize),
}

impl Default for BalanceTarget {
    fn default() -> Self {
        BalanceTarget::MatchLargest
    }
}

/// A recording with its detected transitions, the source of augmented windows.
#[derive(Debug, Clone, Copy)]
pub struct TransitionSource<'a> {
    pub intensity: &'a IntensityTrace,
    pub features: &'a FeatureMatrix,
    pub spans: &'a [TransitionSpan],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub before: Vec<usize>,
    pub after: Vec<usize>,
    pub augmented: usize,
    pub augmented_rising: usize,
    pub augmented_falling: usize,
    /// Effective per-class target (never above the largest class).
    pub target: usize,
    /// Largest over smallest nonzero class count.
    pub ratio_before: Option<f64>,
    pub ratio_after: Option<f64>,
    /// Classes left below target, with the number of windows missing.
    pub shortfalls: BTreeMap<u8, usize>,
}

pub fn class_ratio(counts: &[usize]) -> Option<f64> {
    let nonzero = counts.iter().copied().filter(|c| *c > 0);
    let max = nonzero.clone().max()?;
    let min = nonzero.min()?;
    Some(max as f64 / min as f64)
}

impl BalanceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `class,before,after,added,shortfall` histogram.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,before,after,added,shortfall\n");
        for c in 0..self.before.len() {
            let _ = writeln!(
                out,
                "{c},{},{},{},{}",
                self.before[c],
                self.after[c],
                self.after[c] - self.before[c],
                self.shortfalls.get(&(c as u8)).copied().unwrap_or(0)
            );
        }
        out
    }
}

struct Candidate {
    window: WindowSpec,
    source: usize,
    direction: Direction,
}

/// Adds transitional windows to under-represented classes.
///
/// Candidate windows end inside a span, start on multiples of `dense_stride`
/// from the span start, lie entirely on valid frames and are new by
/// `(subject, video, start)`. Each class below the target receives up to its
/// deficit, picked evenly across its candidates in (subject, video, start)
/// order. A class with no base windows is only populated when its candidates
/// can reach the smallest nonzero class, so the max/min ratio never grows.
pub fn augment_transitional(
    dataset: &SegmentDataset,
    sources: &[TransitionSource<'_>],
    target: BalanceTarget,
    dense_stride: usize,
) -> (SegmentDataset, BalanceReport) {
    let length = dataset.params.length;
    let dense_stride = dense_stride.max(1);
    let before = dataset.class_counts();
    let largest = before.iter().copied().max().unwrap_or(0);
    let min_nonzero = before.iter().copied().filter(|c| *c > 0).min().unwrap_or(0);
    let goal = match target {
        BalanceTarget::MatchLargest => largest,
        BalanceTarget::Count(n) => n.min(largest),
    };

    let mut taken: HashSet<(String, String, usize)> = dataset
        .windows()
        .iter()
        .map(|w| (w.subject_id.clone(), w.video_id.clone(), w.start))
        .collect();

    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (sources[a].intensity, sources[b].intensity);
        (&x.subject_id, &x.video_id).cmp(&(&y.subject_id, &y.video_id))
    });

    let mut by_class: Vec<Vec<Candidate>> = (0..NUM_CLASSES).map(|_| Vec::new()).collect();
    for &si in &order {
        let src = &sources[si];
        let it = src.intensity;
        if src.features.rows != it.len() || src.features.cols != dataset.dim {
            continue;
        }
        let mut spans: Vec<&TransitionSpan> = src.spans.iter().collect();
        spans.sort_by_key(|s| s.start);
        let mut starts = Vec::new();
        for span in spans {
            let mut end = span.start;
            while end < span.end.min(it.len()) {
                if end + 1 >= length {
                    let start = end + 1 - length;
                    if it.valid[start..=end].iter().all(|v| *v) {
                        starts.push((start, span.direction));
                    }
                }
                end += dense_stride;
            }
        }
        starts.sort_by_key(|(s, _)| *s);
        for (start, direction) in starts {
            let key = (it.subject_id.clone(), it.video_id.clone(), start);
            if taken.contains(&key) {
                continue;
            }
            taken.insert(key);
            let label = it.label[start + length - 1];
            by_class[label as usize].push(Candidate {
                window: WindowSpec {
                    subject_id: it.subject_id.clone(),
                    video_id: it.video_id.clone(),
                    start,
                    label,
                    augmented: true,
                },
                source: si,
                direction,
            });
        }
    }

    let mut out = dataset.clone();
    let mut shortfalls = BTreeMap::new();
    let (mut rising, mut falling) = (0, 0);
    for (class, candidates) in by_class.iter().enumerate() {
        let have = before[class];
        let deficit = goal.saturating_sub(have);
        if deficit == 0 {
            continue;
        }
        if have == 0 && candidates.len().min(deficit) < min_nonzero {
            if goal > 0 && !candidates.is_empty() {
                shortfalls.insert(class as u8, deficit);
            }
            continue;
        }
        let take = deficit.min(candidates.len());
        if take < deficit {
            shortfalls.insert(class as u8, deficit - take);
        }
        for i in 0..take {
            let c = &candidates[i * candidates.len() / take];
            let feats = sources[c.source].features;
            let lo = c.window.start * feats.cols;
            out.push(c.window.clone(), &feats.data[lo..lo + length * feats.cols]);
            match c.direction {
                Direction::Rising => rising += 1,
                Direction::Falling => falling += 1,
            }
        }
    }
    let after = out.class_counts();
    let report = BalanceReport {
        before: before.to_vec(),
        after: after.to_vec(),
        augmented: out.len() - dataset.len(),
        augmented_rising: rising,
        augmented_falling: falling,
        target: goal,
        ratio_before: class_ratio(&before),
        ratio_after: class_ratio(&after),
        shortfalls,
    };
    (out, report)
}
