//! Per-subject fine-tuning on neutral-face windows.
//!
//! A new subject's windows are split into those lying wholly inside a
//! declared neutral span (relabeled class 0) and those wholly outside it.
//! Each iteration fine-tunes for one epoch on the neutral windows of a few
//! sampled videos, then scores the active windows.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{evaluate, EvalError, EvalReport};
use crate::exec::Exec;
use crate::ingest::SubjectEntry;
use crate::labeling::NUM_CLASSES;
use crate::scorer::{train_samples, Sample, ScorerConfig, ScorerError, ScorerModel};
use crate::segmentation::SegmentDataset;
use crate::synth::derive_seed;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("recording `{subject_id}/{video_id}` has no neutral_span")]
    MissingNeutralSpan { subject_id: String, video_id: String },
    #[error("subject `{0}` has no window inside a neutral span")]
    NoNeutralWindows(String),
    #[error("subject `{0}` has no active windows to evaluate")]
    NoActiveWindows(String),
    #[error("window `{subject_id}/{video_id}` start {start} is both neutral and active")]
    Overlap {
        subject_id: String,
        video_id: String,
        start: usize,
    },
    #[error("models disagree on dimensions")]
    DimMismatch,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Windows of one subject, partitioned around the neutral spans.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralActiveSplit {
    pub subject_id: String,
    /// Windows inside a neutral span, all labeled 0.
    pub neutral: SegmentDataset,
    /// Windows that do not touch a neutral span.
    pub active: SegmentDataset,
    /// Windows overlapping a span boundary.
    pub discarded: usize,
}

/// Splits the subject's windows in `dataset`. Every recording of the subject
/// must declare a neutral span.
pub fn split_neutral_active(subject: &SubjectEntry, dataset: &SegmentDataset) -> Result<NeutralActiveSplit, AdaptError> {
    let len = dataset.params.length;
    let mut neutral = SegmentDataset::new(dataset.params, dataset.dim, dataset.provenance.clone());
    let mut active = neutral.clone();
    let mut discarded = 0;
    for rec in &subject.recordings {
        let span = rec.neutral_span.ok_or_else(|| AdaptError::MissingNeutralSpan {
            subject_id: subject.subject_id.clone(),
            video_id: rec.video_id.clone(),
        })?;
        for (i, w) in dataset.windows().iter().enumerate() {
            if w.subject_id != subject.subject_id || w.video_id != rec.video_id {
                continue;
            }
            let (start, end) = (w.start as u64, (w.start + len) as u64);
            if span.contains_range(w.start, len) {
                let mut w = w.clone();
                w.label = 0;
                neutral.push(w, dataset.features(i));
            } else if end <= span.start || start >= span.end {
                active.push(w.clone(), dataset.features(i));
            } else {
                discarded += 1;
            }
        }
    }
    if neutral.is_empty() {
        return Err(AdaptError::NoNeutralWindows(subject.subject_id.clone()));
    }
    Ok(NeutralActiveSplit {
        subject_id: subject.subject_id.clone(),
        neutral,
        active,
        discarded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub videos_per_iteration: usize,
    /// Class tolerance of the tracked accuracy.
    pub k: usize,
    /// Fine-tuning recipe; `epochs` is ignored (one epoch per iteration).
    pub fine_tune: ScorerConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            videos_per_iteration: 3,
            k: 2,
            fine_tune: ScorerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptPlan {
    pub split: NeutralActiveSplit,
    pub config: AdaptConfig,
}

impl AdaptPlan {
    /// Checks that the neutral and active sets share no `(video, start)` key.
    pub fn new(split: NeutralActiveSplit, config: AdaptConfig) -> Result<Self, AdaptError> {
        let mut fine = config.fine_tune.clone();
        fine.epochs = 1;
        fine.validate()?;
        if split.active.is_empty() {
            return Err(AdaptError::NoActiveWindows(split.subject_id.clone()));
        }
        let neutral: HashSet<(&str, usize)> =
            split.neutral.windows().iter().map(|w| (w.video_id.as_str(), w.start)).collect();
        if let Some(w) = split
            .active
            .windows()
            .iter()
            .find(|w| neutral.contains(&(w.video_id.as_str(), w.start)))
        {
            return Err(AdaptError::Overlap {
                subject_id: w.subject_id.clone(),
                video_id: w.video_id.clone(),
                start: w.start,
            });
        }
        Ok(Self { split, config })
    }

    pub fn neutral_videos(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.split.neutral.windows().iter().map(|w| w.video_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptCurve {
    pub subject_id: String,
    pub k: usize,
    /// Within-k accuracy on the active windows; entry 0 is the unadapted model.
    pub within_k: Vec<f64>,
    pub exact: Vec<f64>,
    /// Videos whose neutral windows fed each iteration.
    pub sampled_videos: Vec<Vec<String>>,
    /// Set when fewer videos than requested were available.
    pub with_replacement: bool,
    pub n_active: usize,
    pub n_neutral: usize,
}

impl AdaptCurve {
    pub fn baseline(&self) -> f64 {
        self.within_k[0]
    }

    pub fn gain(&self) -> f64 {
        self.within_k.last().copied().unwrap_or(0.0) - self.baseline()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }

    /// `iteration,within_k,exact`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,within_k,exact\n");
        for (i, (w, e)) in self.within_k.iter().zip(&self.exact).enumerate() {
            let _ = writeln!(out, "{i},{w:.6},{e:.6}");
        }
        out
    }
}

fn score(model: &ScorerModel, data: &SegmentDataset, exec: Exec) -> Result<EvalReport, AdaptError> {
    let preds: Vec<u8> = model.predict(data, exec)?.iter().map(|p| p.class).collect();
    Ok(evaluate(&preds, &data.labels())?)
}

/// Runs the plan. Only active windows are scored, so nothing used for
/// fine-tuning is ever evaluated.
pub fn adapt(model: &ScorerModel, plan: &AdaptPlan, exec: Exec) -> Result<(ScorerModel, AdaptCurve), AdaptError> {
    let cfg = &plan.config;
    let split = &plan.split;
    let videos = plan.neutral_videos();
    let per_iter = cfg.videos_per_iteration.max(1);
    let with_replacement = videos.len() < per_iter;

    let base = score(model, &split.active, exec)?;
    let mut curve = AdaptCurve {
        subject_id: split.subject_id.clone(),
        k: cfg.k,
        within_k: vec![base.within(cfg.k)],
        exact: vec![base.exact],
        sampled_videos: Vec::new(),
        with_replacement,
        n_active: split.active.len(),
        n_neutral: split.neutral.len(),
    };
    let mut current = model.clone();
    for it in 1..=cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, it as u64));
        let picked: Vec<&String> = if with_replacement {
            (0..per_iter).map(|_| &videos[rng.random_range(0..videos.len())]).collect()
        } else {
            let mut idx = sample(&mut rng, videos.len(), per_iter).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &videos[i]).collect()
        };
        let mut samples = Vec::new();
        for v in &picked {
            for (i, w) in split.neutral.windows().iter().enumerate() {
                if &w.video_id == *v {
                    samples.push(Sample {
                        features: split.neutral.features(i),
                        label: 0,
                    });
                }
            }
        }
        let mut fine = cfg.fine_tune.clone();
        fine.epochs = 1;
        fine.seed = derive_seed(cfg.seed ^ fine.seed, 1000 + it as u64);
        let (next, _) = train_samples(&current, &samples, &fine, exec)?;
        current = next;
        let r = score(&current, &split.active, exec)?;
        curve.within_k.push(r.within(cfg.k));
        curve.exact.push(r.exact);
        curve.sampled_videos.push(picked.into_iter().cloned().collect());
    }
    Ok((current, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptComparison {
    pub before: EvalReport,
    pub after: EvalReport,
    /// `after.histogram[d] - before.histogram[d]`.
    pub delta: Vec<i64>,
}

impl AdaptComparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// `difference,before,after,delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("difference,before,after,delta\n");
        for d in 0..NUM_CLASSES {
            let _ = writeln!(
                out,
                "{d},{},{},{}",
                self.before.histogram[d], self.after.histogram[d], self.delta[d]
            );
        }
        out
    }
}

/// Label-difference histograms of two models over the same active windows.
pub fn adapt_compare(
    base: &ScorerModel,
    adapted: &ScorerModel,
    active: &SegmentDataset,
    exec: Exec,
) -> Result<AdaptComparison, AdaptError> {
    if base.dims() != adapted.dims() {
        return Err(AdaptError::DimMismatch);
    }
    let before = score(base, active, exec)?;
    let after = score(adapted, active, exec)?;
    let delta = (0..NUM_CLASSES)
        .map(|d| after.histogram[d] as i64 - before.histogram[d] as i64)
        .collect();
    Ok(AdaptComparison { before, after, delta })
}
