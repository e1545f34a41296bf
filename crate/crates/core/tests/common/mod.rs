#![allow(dead_code)]

use std::fs;

use intensity_core::exec::Exec;
use intensity_core::ingest::{load_manifest_file, AuTrace, DatasetManifest, FeatureMatrix};
use intensity_core::labeling::{label_subject, EmotionAuMap, IntensityTrace};
use intensity_core::segmentation::{build_dataset, LabeledRecording, SegmentDataset, WindowParams};
use intensity_core::synth::{gen_corpus, CorpusConfig};

/// A generated corpus, reloaded from disk and labeled per subject.
pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub traces: Vec<IntensityTrace>,
    pub features: Vec<FeatureMatrix>,
    pub tags: Vec<String>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        gen_corpus(cfg, dir.path(), Exec::default()).unwrap();
        let manifest = load_manifest_file(&dir.path().join("manifest.json")).unwrap();
        let map = EmotionAuMap::happiness();
        let (mut traces, mut features, mut tags) = (Vec::new(), Vec::new(), Vec::new());
        for s in &manifest.subjects {
            let raw: Vec<AuTrace> = s
                .recordings
                .iter()
                .map(|r| manifest.load_trace(&s.subject_id, r).unwrap())
                .collect();
            let (_, labeled) = label_subject(&raw, &map).unwrap();
            for (r, it) in s.recordings.iter().zip(labeled) {
                let bytes = fs::read(r.features_path.as_ref().unwrap()).unwrap();
                features.push(FeatureMatrix::from_bytes(&bytes).unwrap());
                tags.push(r.task_tag.clone());
                traces.push(it);
            }
        }
        Self {
            dir,
            manifest,
            traces,
            features,
            tags,
        }
    }

    pub fn recordings(&self) -> Vec<LabeledRecording<'_>> {
        self.traces
            .iter()
            .zip(&self.features)
            .map(|(intensity, features)| LabeledRecording { intensity, features })
            .collect()
    }

    pub fn dataset(&self) -> SegmentDataset {
        build_dataset(&self.recordings(), WindowParams::default(), "test", Exec::default()).unwrap()
    }
}
