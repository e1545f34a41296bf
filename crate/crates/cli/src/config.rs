use std::fs;
use std::path::{Path, PathBuf};

use intensity_core::adaptive::AdaptConfig;
use intensity_core::augmentation::{BalanceTarget, TransitionParams};
use intensity_core::labeling::EmotionAuMap;
use intensity_core::scorer::ScorerConfig;
use intensity_core::segmentation::WindowParams;
use intensity_core::synth::CorpusConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub corpus: CorpusConfig,
    /// Fresh subjects used by the `adapt` stage.
    pub new_subjects: CorpusConfig,
    pub labeling: Labeling,
    pub segmentation: WindowParams,
    pub augmentation: Augmentation,
    pub split: Split,
    pub scorer: ScorerConfig,
    pub adapt: AdaptConfig,
    pub grad_check: GradCheck,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Existing corpus directory with a `manifest.json`; generated when unset.
    pub corpus_dir: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Labeling {
    /// JSON emotion map; happiness when unset.
    pub emotion_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub smooth_window: usize,
    pub slope_threshold: f64,
    pub dense_stride: usize,
    pub target: BalanceTarget,
}

impl Default for Augmentation {
    fn default() -> Self {
        let t = TransitionParams::default();
        Self {
            smooth_window: t.smooth_window,
            slope_threshold: t.slope_threshold,
            dense_stride: 1,
            target: BalanceTarget::MatchLargest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Plateau batch trains, pulse batch validates.
    Batch,
    /// Seeded shuffle of subjects.
    Fraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    pub mode: SplitMode,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            mode: SplitMode::Batch,
            fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheck {
    pub epsilon: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            batch: 8,
            seed: 0,
        }
    }
}

/// Learning rate used when training the from-scratch reference scorer.
pub const PIPELINE_LR: f64 = 0.01;

impl Default for PipelineConfig {
    fn default() -> Self {
        let scorer = ScorerConfig {
            learning_rate: PIPELINE_LR,
            ..ScorerConfig::default()
        };
        let mut new_subjects = CorpusConfig {
            n_subjects: 5,
            batch_one_subjects: 5,
            id_prefix: "n".into(),
            seed: 1000,
            ..CorpusConfig::default()
        };
        new_subjects.subject.offset_range = (0.45, 0.45);
        Self {
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            new_subjects,
            labeling: Labeling::default(),
            segmentation: WindowParams::default(),
            augmentation: Augmentation::default(),
            split: Split::default(),
            adapt: AdaptConfig {
                fine_tune: scorer.clone(),
                ..AdaptConfig::default()
            },
            scorer,
            grad_check: GradCheck::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults, then the config file, then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Invalid(m));
        if self.segmentation.length == 0 || self.segmentation.stride == 0 {
            return bad("segmentation length and stride must be positive".into());
        }
        if self.augmentation.smooth_window == 0 || self.augmentation.smooth_window % 2 == 0 {
            return bad("augmentation.smooth_window must be odd".into());
        }
        if !(self.augmentation.slope_threshold > 0.0) {
            return bad("augmentation.slope_threshold must be positive".into());
        }
        if self.augmentation.dense_stride == 0 || self.augmentation.dense_stride >= self.segmentation.stride {
            return bad("augmentation.dense_stride must be in 1..segmentation.stride".into());
        }
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return bad("split.fraction must be in (0, 1)".into());
        }
        self.scorer.validate().map_err(|e| CliError::Invalid(format!("scorer: {e}")))?;
        self.adapt
            .fine_tune
            .validate()
            .map_err(|e| CliError::Invalid(format!("adapt.fine_tune: {e}")))?;
        if self.adapt.videos_per_iteration == 0 {
            return bad("adapt.videos_per_iteration must be positive".into());
        }
        if !(1e-7..=1e-3).contains(&self.grad_check.epsilon) || self.grad_check.batch == 0 {
            return bad("grad_check.epsilon must be in [1e-7, 1e-3] and batch positive".into());
        }
        if let Some(p) = &self.labeling.emotion_map {
            if !p.is_file() {
                return bad(format!("labeling.emotion_map `{}` does not exist", p.display()));
            }
        }
        if let Some(p) = &self.paths.corpus_dir {
            if !p.join("manifest.json").is_file() {
                return bad(format!("paths.corpus_dir `{}` has no manifest.json", p.display()));
            }
        }
        Ok(())
    }

    pub fn emotion_map(&self) -> Result<EmotionAuMap, CliError> {
        let map = match &self.labeling.emotion_map {
            None => EmotionAuMap::happiness(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                EmotionAuMap::from_json(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
            }
        };
        map.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(map)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path. The value is parsed as JSON, falling back to a plain
/// string. Every path segment must already exist, so typos are rejected.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("checked"),
            Value::Array(items) => match part.parse::<usize>().ok().and_then(|i| items.get_mut(i)) {
                Some(v) => v,
                None => return Err(CliError::Invalid(format!("unknown config key `{key}`"))),
            },
            _ => return Err(CliError::Invalid(format!("unknown config key `{key}`"))),
        };
    }
    *slot = value;
    Ok(())
}
