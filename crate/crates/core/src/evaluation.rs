//! Accuracy metrics, per-task intensity summaries and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{IntensityTrace, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("class {class} at index {index} outside 0..=10")]
    Class { index: usize, class: u8 },
    #[error("recording `{0}` has no task tag")]
    MissingTask(String),
    #[error("unknown task tag `{tag}` on recording `{recording}`")]
    UnknownTask { recording: String, tag: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub exact: f64,
    /// `within_k[k]` is the share of windows off by at most `k` classes.
    pub within_k: Vec<f64>,
    /// `histogram[d]` counts windows off by exactly `d` classes.
    pub histogram: Vec<usize>,
    /// Rows are true labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predictions: &[u8], labels: &[u8]) -> Result<EvalReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut histogram = vec![0usize; NUM_CLASSES];
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for (index, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        for class in [p, y] {
            if class as usize >= NUM_CLASSES {
                return Err(EvalError::Class { index, class });
            }
        }
        histogram[p.abs_diff(y) as usize] += 1;
        confusion[y as usize][p as usize] += 1;
    }
    let n = predictions.len();
    let mut within_k = Vec::with_capacity(NUM_CLASSES);
    let mut cum = 0;
    for h in &histogram {
        cum += h;
        within_k.push(cum as f64 / n as f64);
    }
    Ok(EvalReport {
        n,
        exact: within_k[0],
        within_k,
        histogram,
        confusion,
    })
}

impl EvalReport {
    pub fn within(&self, k: usize) -> f64 {
        self.within_k[k.min(NUM_CLASSES - 1)]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `k,within_k,histogram` with one row per class distance.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,within_k,histogram\n");
        for k in 0..self.within_k.len() {
            let _ = writeln!(out, "{k},{:.6},{}", self.within_k[k], self.histogram[k]);
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("label");
        for c in 0..NUM_CLASSES {
            let _ = write!(out, ",pred{c}");
        }
        out.push('\n');
        for (y, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{y}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single subject.
    pub sd: f64,
    /// Highest intensity per subject within this task.
    pub per_subject: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxIntensityReport {
    /// Ordered by task tag.
    pub groups: Vec<TaskSummary>,
    /// Highest group mean minus lowest; absent with fewer than two groups.
    pub mean_difference: Option<f64>,
}

/// A labeled recording together with its task tag.
#[derive(Debug, Clone, Copy)]
pub struct TaggedTrace<'a> {
    pub trace: &'a IntensityTrace,
    pub task_tag: &'a str,
}

/// Groups per-subject maxima by task. `tasks` lists the accepted tags; when
/// empty, every non-empty tag is accepted.
pub fn max_intensity_by_task(traces: &[TaggedTrace<'_>], tasks: &[&str]) -> Result<MaxIntensityReport, EvalError> {
    let mut groups: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
    for t in traces {
        let name = format!("{}/{}", t.trace.subject_id, t.trace.video_id);
        if t.task_tag.is_empty() {
            return Err(EvalError::MissingTask(name));
        }
        if !tasks.is_empty() && !tasks.contains(&t.task_tag) {
            return Err(EvalError::UnknownTask {
                recording: name,
                tag: t.task_tag.to_string(),
            });
        }
        let max = t
            .trace
            .intensity
            .iter()
            .zip(&t.trace.valid)
            .filter(|(_, v)| **v)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max.is_finite() {
            let slot = groups
                .entry(t.task_tag)
                .or_default()
                .entry(t.trace.subject_id.clone())
                .or_insert(max);
            *slot = slot.max(max);
        }
    }
    let groups: Vec<TaskSummary> = groups
        .into_iter()
        .map(|(task, per_subject)| {
            let n = per_subject.len() as f64;
            let mean = per_subject.values().sum::<f64>() / n;
            let sd = if per_subject.len() > 1 {
                (per_subject.values().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            TaskSummary {
                task: task.to_string(),
                mean,
                sd,
                per_subject,
            }
        })
        .collect();
    let mean_difference = (groups.len() >= 2).then(|| {
        let means = groups.iter().map(|g| g.mean);
        means.clone().fold(f64::NEG_INFINITY, f64::max) - means.fold(f64::INFINITY, f64::min)
    });
    Ok(MaxIntensityReport {
        groups,
        mean_difference,
    })
}

impl MaxIntensityReport {
    /// `task,subject_id,max_intensity` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,subject_id,max_intensity\n");
        for g in &self.groups {
            for (s, v) in &g.per_subject {
                let _ = writeln!(out, "{},{s},{v:.6}", g.task);
            }
        }
        out
    }
}

const W: f64 = 800.0;
const H: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 500" width="800" height="500" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="800" height="500" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="400" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y1} V{y0} H{x1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            fmt_num(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.fold(0.0, f64::max);
    if m <= 0.0 {
        1.0
    } else if m <= 1.0 {
        1.0
    } else {
        (m / 4.0).ceil() * 4.0
    }
}

/// Grouped bar chart; each series gets one bar per category.
pub fn bar_chart_svg(title: &str, x_label: &str, y_label: &str, categories: &[String], series: &[(&str, &[f64])]) -> String {
    const COLORS: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];
    let mut out = String::new();
    svg_open(&mut out, title);
    let y_max = nice_max(series.iter().flat_map(|(_, v)| v.iter().copied()));
    axes(&mut out, x_label, y_label, y_max);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let slot = plot_w / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let x = LEFT + slot * ci as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot / 2.0,
            H - BOTTOM + 16.0,
            escape(cat)
        );
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0);
            let h = plot_h * v / y_max;
            let bx = x + slot * 0.1 + bar * si as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{bx:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{}</title></rect>"#,
                H - BOTTOM - h,
                bar,
                COLORS[si % COLORS.len()],
                fmt_num(v)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
                bx + bar / 2.0,
                H - BOTTOM - h - 3.0,
                fmt_num(v)
            );
        }
    }
    legend(&mut out, series.iter().map(|(n, _)| *n), &COLORS);
    out.push_str("</svg>\n");
    out
}

fn legend<'a>(out: &mut String, names: impl Iterator<Item = &'a str>, colors: &[&str]) {
    for (i, name) in names.enumerate() {
        let y = TOP + 5.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT - 150.0,
            colors[i % colors.len()],
            W - RIGHT - 132.0,
            y + 10.0,
            escape(name)
        );
    }
}

/// Line chart of `ys` against integer steps `0..ys.len()`.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    const COLORS: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];
    let mut out = String::new();
    svg_open(&mut out, title);
    let y_max = nice_max(series.iter().flat_map(|(_, v)| v.iter().copied()));
    axes(&mut out, x_label, y_label, y_max);
    let steps = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2) - 1;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let px = |i: usize| LEFT + plot_w * i as f64 / steps as f64;
    let py = |v: f64| H - BOTTOM - plot_h * v / y_max;
    for i in 0..=steps {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{i}</text>"#,
            px(i),
            H - BOTTOM + 16.0
        );
    }
    for (si, (_, values)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", px(i), py(*v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
                px(i),
                py(*v),
                px(i),
                py(*v) - 7.0,
                fmt_num(*v)
            );
        }
    }
    legend(&mut out, series.iter().map(|(n, _)| *n), &COLORS);
    out.push_str("</svg>\n");
    out
}

/// Difference histogram as an SVG bar chart.
pub fn histogram_svg(title: &str, report: &EvalReport) -> String {
    let cats: Vec<String> = (0..report.histogram.len()).map(|d| d.to_string()).collect();
    let counts: Vec<f64> = report.histogram.iter().map(|c| *c as f64).collect();
    bar_chart_svg(title, "|predicted - label|", "windows", &cats, &[("windows", &counts)])
}
