//! Synthetic subjects, AU traces and corpora with known ground-truth expressivity.
//!
//! A recording is driven by an expressivity curve `g(t) ∈ [0, 1]`. Each AU
//! channel follows `baseline + g · (max − baseline)` plus observation noise.
//! Alongside the AU trace every recording carries an appearance embedding: the
//! noisy AU activations shifted by a per-subject nuisance offset, followed by a
//! constant per-subject identity vector. Labels come from the AU trace, the
//! scorer sees the embedding.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::ingest::{AuTrace, Batch, DatasetManifest, FeatureMatrix, FrameSpan, Recording, SubjectEntry};

pub const HAPPINESS_CHANNELS: [&str; 4] = ["AU6L", "AU6R", "AU12L", "AU12R"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis parameters: {0}")]
    Params(String),
    #[error("writing {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn grid(x: f64, steps: f64) -> f64 {
    (x * steps).round() / steps
}

/// Distribution parameters for subject profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectParams {
    pub au6_max: (f64, f64),
    pub au12_max: (f64, f64),
    pub baseline_max: f64,
    pub noise_sd: f64,
    /// Frames from neutral to peak.
    pub onset_frames: usize,
    /// Fraction of frames without a detected face.
    pub dropout: f64,
    /// Range of the per-subject appearance shift added to the embedding.
    pub offset_range: (f64, f64),
    pub identity_dims: usize,
    pub identity_scale: f64,
    pub appearance_noise_sd: f64,
}

impl Default for SubjectParams {
    fn default() -> Self {
        Self {
            au6_max: (0.4, 0.6),
            au12_max: (0.5, 0.8),
            baseline_max: 0.05,
            noise_sd: 0.01,
            onset_frames: 15,
            dropout: 0.02,
            offset_range: (0.0, 0.3),
            identity_dims: 0,
            identity_scale: 1.0,
            appearance_noise_sd: 0.02,
        }
    }
}

impl SubjectParams {
    fn validate(&self) -> Result<(), SynthError> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        if !range_ok(self.au6_max) || !range_ok(self.au12_max) {
            return Err(SynthError::Params("maxima ranges must lie in (0, 1]".into()));
        }
        if !(0.0..self.au6_max.0.min(self.au12_max.0)).contains(&self.baseline_max)
            && self.baseline_max != 0.0
        {
            return Err(SynthError::Params("baseline_max must be below every maximum".into()));
        }
        let (olo, ohi) = self.offset_range;
        if self.noise_sd < 0.0 || self.appearance_noise_sd < 0.0 || !(0.0 <= olo && olo <= ohi) {
            return Err(SynthError::Params("noise and offsets must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.dropout) {
            return Err(SynthError::Params("dropout must lie in [0, 0.5)".into()));
        }
        if self.onset_frames == 0 {
            return Err(SynthError::Params("onset_frames must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub channels: Vec<String>,
    /// Peak activation per channel, on a 0.001 grid.
    pub maxima: Vec<f64>,
    /// Resting activation per channel, on a 0.001 grid.
    pub baseline: Vec<f64>,
    pub noise_sd: f64,
    pub onset_frames: usize,
    pub dropout: f64,
    pub appearance_offset: Vec<f64>,
    pub identity: Vec<f64>,
    pub appearance_noise_sd: f64,
}

pub fn gen_subject(seed: u64) -> SubjectProfile {
    gen_subject_with(seed, &SubjectParams::default()).expect("default parameters are valid")
}

pub fn gen_subject_with(seed: u64, params: &SubjectParams) -> Result<SubjectProfile, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subject_id = format!("subj-{:08x}", rng.random::<u32>());
    let mut maxima = Vec::with_capacity(4);
    let mut baseline = Vec::with_capacity(4);
    for ch in HAPPINESS_CHANNELS {
        let (lo, hi) = if ch.starts_with("AU6") {
            params.au6_max
        } else {
            params.au12_max
        };
        let m = grid(rng.random_range(lo..=hi), 1000.0).clamp(lo, hi);
        let b = if params.baseline_max > 0.0 {
            grid(rng.random_range(0.0..=params.baseline_max), 1000.0)
        } else {
            0.0
        };
        maxima.push(m);
        baseline.push(b);
    }
    let (olo, ohi) = params.offset_range;
    let shift = rng.random_range(olo..=ohi);
    let appearance_offset = (0..4)
        .map(|_| shift + rng.random_range(-0.1..=0.1) * ohi)
        .collect();
    let identity = (0..params.identity_dims)
        .map(|_| rng.random_range(-1.0..=1.0) * params.identity_scale)
        .collect();
    Ok(SubjectProfile {
        subject_id,
        channels: HAPPINESS_CHANNELS.map(String::from).to_vec(),
        maxima,
        baseline,
        noise_sd: params.noise_sd,
        onset_frames: params.onset_frames,
        dropout: params.dropout,
        appearance_offset,
        identity,
        appearance_noise_sd: params.appearance_noise_sd,
    })
}

/// Held intensity of a plateau recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Mid,
    Full,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::Full => "full",
        }
    }

    /// Range of the held expressivity.
    fn band(self) -> (f64, f64) {
        match self {
            Level::Low => (0.12, 0.26),
            Level::Mid => (0.72, 0.86),
            Level::Full => (0.95, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Neutral, single peak at mid-video, back to neutral.
    Pulse { peak: f64 },
    /// Short neutral lead-in, then a held intensity until the end.
    Plateau { level: Level },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub protocol: Protocol,
    pub length: usize,
    pub fps: f64,
    pub task_tag: String,
}

impl TaskScript {
    pub fn pulse(peak: f64, length: usize, fps: f64, task_tag: impl Into<String>) -> Self {
        Self {
            protocol: Protocol::Pulse { peak },
            length,
            fps,
            task_tag: task_tag.into(),
        }
    }

    pub fn plateau(level: Level, length: usize, fps: f64) -> Self {
        Self {
            protocol: Protocol::Plateau { level },
            length,
            fps,
            task_tag: format!("happiness/{}", level.name()),
        }
    }

    fn validate(&self, onset: usize) -> Result<(), SynthError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(SynthError::Params("fps must be positive".into()));
        }
        let min_len = match self.protocol {
            Protocol::Pulse { peak } => {
                if !(peak > 0.0 && peak <= 1.0) {
                    return Err(SynthError::Params("pulse peak must lie in (0, 1]".into()));
                }
                2 * onset + 8
            }
            Protocol::Plateau { .. } => plateau_lead_in(self.length) + onset + 4,
        };
        if self.length < min_len {
            return Err(SynthError::Params(format!(
                "script of {} frames is shorter than the minimum {min_len}",
                self.length
            )));
        }
        Ok(())
    }
}

fn plateau_lead_in(length: usize) -> usize {
    (length / 5).max(20)
}

/// Smooth random signal normalized to span exactly `[0, 1]`.
fn jitter(len: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.random_range(0.8..3.0) * fps;
            (2.0 * PI / period, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
        })
        .collect();
    let raw: Vec<f64> = (0..len)
        .map(|t| comps.iter().map(|(w, p, a)| a * (w * t as f64 + p).sin()).sum())
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.into_iter().map(|x| (x - lo) / span).collect()
}

fn raised_cosine(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    0.5 * (1.0 - (PI * u).cos())
}

/// Expressivity ceiling of neutral stretches (stays inside classes 0-2).
const NEUTRAL_CEILING: f64 = 0.06;

/// Ground-truth curve on a 0.001 grid plus the end of the neutral lead-in and
/// the frames that sit exactly on the peak.
struct Curve {
    g: Vec<f64>,
    neutral_end: usize,
    peak_frames: Vec<usize>,
}

fn expressivity_curve(script: &TaskScript, onset: usize, rng: &mut ChaCha8Rng) -> Curve {
    let n = script.length;
    let low = jitter(n, script.fps, rng);
    let high = jitter(n, script.fps, rng);
    let mut env = vec![0.0; n];
    let mut top = vec![0.0; n];
    let neutral_end;
    match script.protocol {
        Protocol::Pulse { peak } => {
            let mid = n / 2;
            let half = ((n as f64) * rng.random_range(0.28..0.32)) as usize;
            let rise = mid.saturating_sub(half + onset);
            neutral_end = rise;
            for t in 0..n {
                let d = t.abs_diff(mid) as f64;
                env[t] = if d <= half as f64 {
                    1.0
                } else {
                    raised_cosine(1.0 - (d - half as f64) / onset as f64)
                };
                // Parabolic cap: exactly `peak` on the three centre frames,
                // falling to 70% of it at the edges of the hold.
                top[t] = if d <= 1.0 {
                    peak
                } else {
                    let u = (d - 1.0) / half.max(1) as f64;
                    (peak * (1.0 - 0.3 * u.min(1.0).powi(2))).min(peak - 0.001)
                };
            }
        }
        Protocol::Plateau { level } => {
            let lead = plateau_lead_in(n);
            neutral_end = lead;
            let (lo, hi) = level.band();
            // Full plateaus touch `hi` somewhere after the onset, so the
            // subject maximum is observed while fully expressed.
            let held = (lead + onset).min(n - 1);
            let hmin = high[held..].iter().copied().fold(f64::INFINITY, f64::min);
            let dip = |x: f64| ((x - hmin) / (1.0 - hmin).max(1e-12)).max(0.0);
            for t in 0..n {
                env[t] = raised_cosine((t as f64 - lead as f64) / onset as f64);
                top[t] = if level == Level::Full {
                    hi - (hi - lo) * dip(high[t])
                } else {
                    lo + (hi - lo) * high[t]
                };
            }
        }
    }
    let g: Vec<f64> = (0..n)
        .map(|t| {
            let neutral = NEUTRAL_CEILING * low[t].powi(3);
            grid(env[t] * top[t] + (1.0 - env[t]) * neutral, 1000.0).clamp(0.0, 1.0)
        })
        .collect();
    let max = g.iter().copied().fold(0.0, f64::max);
    let peak_frames = (0..n).filter(|&t| g[t] == max).collect();
    Curve {
        g,
        neutral_end,
        peak_frames,
    }
}

/// One generated recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub trace: AuTrace,
    pub ground_truth: Vec<f64>,
    pub features: FeatureMatrix,
    /// Frames before the onset of expression.
    pub neutral_span: FrameSpan,
}

pub fn gen_recording(
    profile: &SubjectProfile,
    script: &TaskScript,
    seed: u64,
) -> Result<SynthRecording, SynthError> {
    script.validate(profile.onset_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curve = expressivity_curve(script, profile.onset_frames, &mut rng);
    let n = script.length;
    let w = profile.channels.len();

    // Face-detection dropouts come in short bursts; peak frames always survive
    // so the subject maxima are observable.
    let mut valid = vec![true; n];
    let burst_rate = profile.dropout / 3.5;
    let mut t = 0;
    while t < n {
        if rng.random::<f64>() < burst_rate {
            let len = rng.random_range(1..=6);
            for v in valid.iter_mut().skip(t).take(len) {
                *v = false;
            }
            t += len;
        } else {
            t += 1;
        }
    }
    for &p in &curve.peak_frames {
        valid[p] = true;
    }

    let noise = Normal::new(0.0, profile.noise_sd.max(0.0)).expect("finite sd");
    let app_noise = Normal::new(0.0, profile.appearance_noise_sd.max(0.0)).expect("finite sd");
    let mut values = Vec::with_capacity(n * w);
    let mut feats = Vec::with_capacity(n * (w + profile.identity.len()));
    for t in 0..n {
        let g = curve.g[t];
        for c in 0..w {
            let (b, m) = (profile.baseline[c], profile.maxima[c]);
            let clean = b + g * (m - b);
            let eps = if profile.noise_sd > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let observed = grid((clean + eps).clamp(0.0, 1.0), 1e6);
            values.push(if valid[t] { observed } else { 0.0 });
            let a = if profile.appearance_noise_sd > 0.0 {
                app_noise.sample(&mut rng)
            } else {
                0.0
            };
            feats.push((observed + profile.appearance_offset[c] + a) as f32);
        }
        for &id in &profile.identity {
            let a = if profile.appearance_noise_sd > 0.0 {
                app_noise.sample(&mut rng)
            } else {
                0.0
            };
            feats.push((id + a) as f32);
        }
    }
    let trace = AuTrace::from_flat(
        profile.subject_id.clone(),
        "",
        profile.channels.clone(),
        values,
        valid,
    )
    .map_err(|e| SynthError::Params(e.to_string()))?
    .with_fps(script.fps);
    let dim = w + profile.identity.len();
    Ok(SynthRecording {
        trace,
        ground_truth: curve.g,
        features: FeatureMatrix::new(n, dim, feats),
        neutral_span: FrameSpan {
            start: 0,
            end: curve.neutral_end as u64,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    /// Subjects recorded with the long pulse protocol; the rest use plateaus.
    pub batch_one_subjects: usize,
    pub fps: f64,
    pub pulse_seconds: f64,
    pub plateau_seconds: f64,
    /// Relative jitter of recording lengths.
    pub length_jitter: f64,
    pub subject: SubjectParams,
    /// Subject ids are this prefix followed by a two-digit index.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 41,
            batch_one_subjects: 15,
            fps: 30.0,
            pulse_seconds: 9.0,
            plateau_seconds: 4.0,
            length_jitter: 0.1,
            subject: SubjectParams::default(),
            id_prefix: "s".into(),
            seed: 0,
        }
    }
}

/// Scripts recorded for one subject.
pub fn subject_scripts(config: &CorpusConfig, batch: Batch, rng: &mut ChaCha8Rng) -> Vec<TaskScript> {
    let mut len = |secs: f64| {
        let j = if config.length_jitter > 0.0 {
            rng.random_range(-config.length_jitter..=config.length_jitter)
        } else {
            0.0
        };
        (secs * (1.0 + j) * config.fps).round() as usize
    };
    match batch {
        Batch::One => vec![
            TaskScript::pulse(0.6, len(config.pulse_seconds), config.fps, "happiness/smile"),
            TaskScript::pulse(1.0, len(config.pulse_seconds), config.fps, "happiness/really_smile"),
        ],
        Batch::Two => [Level::Low, Level::Mid, Level::Full]
            .into_iter()
            .map(|l| TaskScript::plateau(l, len(config.plateau_seconds), config.fps))
            .collect(),
    }
}

/// Everything produced for one subject.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub profile: SubjectProfile,
    pub batch: Batch,
    pub recordings: Vec<(TaskScript, SynthRecording)>,
}

/// Generates the subjects of a corpus in memory.
pub fn gen_subjects(config: &CorpusConfig, exec: Exec) -> Result<Vec<SynthSubject>, SynthError> {
    if config.batch_one_subjects > config.n_subjects {
        return Err(SynthError::Params("batch_one_subjects exceeds n_subjects".into()));
    }
    config.subject.validate()?;
    exec.try_map_range(config.n_subjects, |i| {
        let subject_seed = derive_seed(config.seed, i as u64);
        let mut profile = gen_subject_with(subject_seed, &config.subject)?;
        profile.subject_id = format!("{}{i:02}", config.id_prefix);
        let batch = if i < config.batch_one_subjects {
            Batch::One
        } else {
            Batch::Two
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(subject_seed, 1));
        let scripts = subject_scripts(config, batch, &mut rng);
        let recordings = scripts
            .into_iter()
            .enumerate()
            .map(|(k, script)| {
                let mut rec = gen_recording(&profile, &script, derive_seed(subject_seed, 100 + k as u64))?;
                rec.trace.video_id = video_id(&script);
                Ok((script, rec))
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        Ok(SynthSubject {
            profile,
            batch,
            recordings,
        })
    })
}

fn video_id(script: &TaskScript) -> String {
    script
        .task_tag
        .rsplit('/')
        .next()
        .unwrap_or(&script.task_tag)
        .to_string()
}

/// Writes a corpus: `manifest.json`, `profiles.json` and per recording
/// `<subject>/<video>/{trace.csv, ground_truth.csv, features.bin}`.
pub fn gen_corpus(config: &CorpusConfig, dir: &Path, exec: Exec) -> Result<DatasetManifest, SynthError> {
    let subjects = gen_subjects(config, exec)?;
    write_corpus(&subjects, dir)
}

pub fn write_corpus(subjects: &[SynthSubject], dir: &Path) -> Result<DatasetManifest, SynthError> {
    let write = |path: PathBuf, bytes: &[u8]| -> Result<(), SynthError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| SynthError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, bytes).map_err(|source| SynthError::Io { path, source })
    };
    let mut manifest = DatasetManifest::default();
    for s in subjects {
        let mut entry = SubjectEntry {
            subject_id: s.profile.subject_id.clone(),
            recordings: Vec::new(),
        };
        for (script, rec) in &s.recordings {
            let rel = PathBuf::from(&s.profile.subject_id).join(&rec.trace.video_id);
            write(dir.join(&rel).join("trace.csv"), rec.trace.to_csv().as_bytes())?;
            let mut gt = String::from("frame,g\n");
            for (t, g) in rec.ground_truth.iter().enumerate() {
                gt.push_str(&format!("{t},{g:.6}\n"));
            }
            write(dir.join(&rel).join("ground_truth.csv"), gt.as_bytes())?;
            write(dir.join(&rel).join("features.bin"), &rec.features.to_bytes())?;
            entry.recordings.push(Recording {
                video_id: rec.trace.video_id.clone(),
                trace_path: rel.join("trace.csv"),
                features_path: Some(rel.join("features.bin")),
                task_tag: script.task_tag.clone(),
                neutral_span: (!rec.neutral_span.is_empty()).then_some(rec.neutral_span),
                batch: s.batch,
            });
        }
        manifest.subjects.push(entry);
    }
    write(dir.join("manifest.json"), (manifest.to_json() + "\n").as_bytes())?;
    let profiles: Vec<&SubjectProfile> = subjects.iter().map(|s| &s.profile).collect();
    write(
        dir.join("profiles.json"),
        (serde_json::to_string_pretty(&profiles).expect("profiles serialize") + "\n").as_bytes(),
    )?;
    Ok(manifest)
}

/// Reads a `ground_truth.csv` written by [`write_corpus`].
pub fn parse_ground_truth(text: &str) -> Option<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next()? != "frame,g" {
        return None;
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (f, g) = l.split_once(',')?;
            (f.parse::<usize>().ok()? == i).then_some(())?;
            g.parse().ok()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_au_trace;
    use crate::labeling::{label_subject, quantize_intensity, EmotionAuMap};

    fn clean_params() -> SubjectParams {
        SubjectParams {
            baseline_max: 0.0,
            noise_sd: 0.0,
            ..SubjectParams::default()
        }
    }

    #[test]
    fn subjects_are_deterministic_and_in_range() {
        assert_eq!(gen_subject(7), gen_subject(7));
        let (a, b) = (gen_subject(1), gen_subject(2));
        assert_ne!(a.subject_id, b.subject_id);
        assert_ne!(a.maxima, b.maxima);
        for seed in 0..1000 {
            let p = gen_subject(seed);
            for (c, m) in p.channels.iter().zip(&p.maxima) {
                if c.starts_with("AU6") {
                    assert!((0.4..=0.6).contains(m), "{c} = {m}");
                } else {
                    assert!((0.5..=0.8).contains(m));
                }
            }
            assert!(p.baseline.iter().zip(&p.maxima).all(|(b, m)| b < m && *b >= 0.0));
        }
    }

    #[test]
    fn pulse_peaks_mid_video() {
        let p = gen_subject_with(3, &clean_params()).unwrap();
        for len in [120, 269, 270, 300] {
            let rec = gen_recording(&p, &TaskScript::pulse(1.0, len, 30.0, "happiness/really_smile"), 9).unwrap();
            let g = &rec.ground_truth;
            let argmax = (0..len).fold(0, |best, t| if g[t] > g[best] { t } else { best });
            assert!(argmax.abs_diff(len / 2) <= 1, "len {len}: argmax {argmax}");
            assert_eq!(g[argmax], 1.0);
            assert!(g.iter().all(|x| (0.0..=1.0).contains(x)));
            let (_, it) = label_subject(&[rec.trace.clone()], &EmotionAuMap::happiness()).unwrap();
            let x = &it[0].intensity;
            let arg = (0..len).fold(0, |best, t| if x[t] > x[best] { t } else { best });
            assert!(arg.abs_diff(len / 2) <= 1);
        }
    }

    #[test]
    fn zero_noise_full_plateau_recovers_labels() {
        let p = gen_subject_with(11, &clean_params()).unwrap();
        let rec = gen_recording(&p, &TaskScript::plateau(Level::Full, 120, 30.0), 5).unwrap();
        let (_, it) = label_subject(&[rec.trace.clone()], &EmotionAuMap::happiness()).unwrap();
        for t in 0..120 {
            if rec.trace.valid()[t] {
                assert_eq!(it[0].label[t], quantize_intensity(rec.ground_truth[t]).unwrap());
                assert_eq!(it[0].intensity[t], rec.ground_truth[t]);
            }
        }
    }

    #[test]
    fn noisy_labels_stay_within_one_class() {
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..20 {
            let p = gen_subject(seed);
            let traces: Vec<_> = [
                TaskScript::pulse(1.0, 270, 30.0, "happiness/really_smile"),
                TaskScript::plateau(Level::Mid, 120, 30.0),
            ]
            .iter()
            .enumerate()
            .map(|(k, s)| gen_recording(&p, s, seed * 10 + k as u64).unwrap())
            .collect();
            let (_, it) = label_subject(
                &traces.iter().map(|r| r.trace.clone()).collect::<Vec<_>>(),
                &EmotionAuMap::happiness(),
            )
            .unwrap();
            for (rec, lab) in traces.iter().zip(&it) {
                for t in (0..rec.trace.len()).filter(|&t| rec.trace.valid()[t]) {
                    total += 1;
                    let truth = quantize_intensity(rec.ground_truth[t]).unwrap();
                    if lab.label[t].abs_diff(truth) <= 1 {
                        hits += 1;
                    }
                }
            }
        }
        assert!(hits as f64 / total as f64 >= 0.99, "{hits}/{total}");
    }

    #[test]
    fn dropout_rate_is_about_two_percent() {
        let p = gen_subject(5);
        let mut invalid = 0;
        let mut total = 0;
        for seed in 0..200 {
            let rec = gen_recording(&p, &TaskScript::pulse(0.6, 270, 30.0, "happiness/smile"), seed).unwrap();
            invalid += rec.trace.valid().iter().filter(|v| !**v).count();
            total += rec.trace.len();
        }
        let rate = invalid as f64 / total as f64;
        assert!((0.01..0.03).contains(&rate), "{rate}");
    }

    #[test]
    fn rejects_bad_scripts() {
        let p = gen_subject(1);
        assert!(gen_recording(&p, &TaskScript::pulse(1.0, 20, 30.0, "x"), 0).is_err());
        assert!(gen_recording(&p, &TaskScript::pulse(1.5, 270, 30.0, "x"), 0).is_err());
        assert!(gen_recording(&p, &TaskScript::plateau(Level::Low, 120, 0.0), 0).is_err());
    }

    #[test]
    fn corpus_layout_and_protocols() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::default();
        let manifest = gen_corpus(&cfg, dir.path(), Exec::default()).unwrap();
        assert_eq!(manifest.subjects.len(), 41);
        for s in &manifest.subjects {
            let batch = s.recordings[0].batch;
            let (count, secs) = match batch {
                Batch::One => (2, 9.0),
                Batch::Two => (3, 4.0),
            };
            assert_eq!(s.recordings.len(), count);
            for r in &s.recordings {
                let text = fs::read_to_string(dir.path().join(&r.trace_path)).unwrap();
                let t = parse_au_trace(&text).unwrap();
                let seconds = t.len() as f64 / 30.0;
                assert!((seconds - secs).abs() <= secs * 0.1 + 0.05, "{seconds}");
                let gt = parse_ground_truth(
                    &fs::read_to_string(dir.path().join(&r.trace_path).with_file_name("ground_truth.csv")).unwrap(),
                )
                .unwrap();
                assert_eq!(gt.len(), t.len());
                assert!(r.neutral_span.unwrap().end >= 16);
            }
        }
        assert_eq!(
            manifest.subjects.iter().filter(|s| s.recordings[0].batch == Batch::One).count(),
            15
        );
        let loaded = crate::ingest::load_manifest_file(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.subjects.len(), 41);
    }

    #[test]
    fn small_corpus_is_byte_identical_on_rerun() {
        let cfg = CorpusConfig {
            n_subjects: 2,
            batch_one_subjects: 1,
            seed: 99,
            ..CorpusConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_corpus(&cfg, a.path(), Exec::Parallel).unwrap();
        gen_corpus(&cfg, b.path(), Exec::Sequential).unwrap();
        let files = |root: &Path| {
            let mut out = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                    }
                }
            }
            out.sort();
            out
        };
        assert_eq!(files(a.path()), files(b.path()));
    }
}
