//! Pipeline stages. Each stage writes into `<work>/<stage>-<hash>/`, where the
//! hash covers the stage's own config and the hashes of the stages it read.
//! `<work>/stages/<stage>.json` points at the latest completed run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use intensity_core::adaptive::{adapt, adapt_compare, split_neutral_active, AdaptCurve, AdaptPlan};
use intensity_core::augmentation::{augment_transitional, detect_transitions, BalanceReport, TransitionParams, TransitionSource};
use intensity_core::evaluation::{
    bar_chart_svg, evaluate, histogram_svg, line_chart_svg, max_intensity_by_task, EvalReport, MaxIntensityReport,
    TaggedTrace,
};
use intensity_core::exec::Exec;
use intensity_core::ingest::{load_manifest_file, DatasetManifest, FeatureMatrix};
use intensity_core::labeling::{label_subject, EmotionAuMap, IntensityTrace, NUM_CLASSES};
use intensity_core::scorer::{
    dataset_samples, grad_check, init_model, load_checkpoint, save_checkpoint, train, InputDims, ScorerModel,
};
use intensity_core::segmentation::{au_features, build_dataset, LabeledRecording, SegmentDataset, SubjectSplit};
use intensity_core::synth::gen_corpus;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, SplitMode};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Label,
    Segment,
    Augment,
    Split,
    Train,
    Adapt,
    Eval,
    Report,
    GradCheck,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Label => "label",
            Stage::Segment => "segment",
            Stage::Augment => "augment",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Adapt => "adapt",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::GradCheck => "grad-check",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Label => &[Stage::Gen],
            Stage::Segment => &[Stage::Label],
            Stage::Augment => &[Stage::Segment],
            Stage::Split => &[Stage::Augment],
            Stage::Train => &[Stage::Split],
            Stage::Adapt | Stage::Eval => &[Stage::Train],
            Stage::Report => &[Stage::Eval, Stage::Adapt],
            Stage::GradCheck => &[Stage::Split],
        }
    }

    /// File whose presence marks a finished run.
    fn artifact(self) -> &'static str {
        match self {
            Stage::Gen => "corpus.json",
            Stage::Label => "labels.json",
            Stage::Segment => "dataset/dataset.json",
            Stage::Augment => "balance.json",
            Stage::Split => "split.json",
            Stage::Train => "model.ckpt",
            Stage::Adapt => "adapt.json",
            Stage::Eval => "eval.json",
            Stage::Report => "summary.json",
            Stage::GradCheck => "grad_check.json",
        }
    }

    fn from_name(name: &str) -> Option<Stage> {
        [
            Stage::Gen,
            Stage::Label,
            Stage::Segment,
            Stage::Augment,
            Stage::Split,
            Stage::Train,
            Stage::Adapt,
            Stage::Eval,
            Stage::Report,
            Stage::GradCheck,
        ]
        .into_iter()
        .find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    hash: String,
    /// Every stage this run transitively read, by name.
    ancestors: BTreeMap<String, String>,
    summary: Value,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub work: PathBuf,
    pub exec: Exec,
}

/// Output of one stage run.
pub struct Outcome {
    pub stage: Stage,
    pub dir: PathBuf,
    pub hash: String,
    pub summary: Value,
}

impl Outcome {
    pub fn to_json(&self) -> Value {
        json!({
            "stage": self.stage.name(),
            "dir": self.dir.display().to_string(),
            "hash": self.hash,
            "summary": self.summary,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} -> {}\n", self.stage.name(), self.dir.display());
        if let Value::Object(m) = &self.summary {
            for (k, v) in m {
                let _ = writeln!(out, "  {k}: {v}");
            }
        }
        out
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

impl Ctx {
    fn dir(&self, stage: Stage, hash: &str) -> PathBuf {
        self.work.join(format!("{}-{hash}", stage.name()))
    }

    fn pointer(&self, stage: Stage) -> PathBuf {
        self.work.join("stages").join(format!("{}.json", stage.name()))
    }

    fn record(&self, stage: Stage) -> Option<StageRecord> {
        let rec: StageRecord = serde_json::from_slice(&fs::read(self.pointer(stage)).ok()?).ok()?;
        self.dir(stage, &rec.hash).join(stage.artifact()).is_file().then_some(rec)
    }

    /// Config slice that determines a stage's output.
    fn stage_config(&self, stage: Stage) -> Result<Value, CliError> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Gen => json!({
                "corpus": c.corpus,
                "new_subjects": c.new_subjects,
                "corpus_dir": c.paths.corpus_dir,
            }),
            Stage::Label => json!({ "emotion_map": c.emotion_map().map(|m| serde_json::to_value(m).expect("map"))? }),
            Stage::Segment => json!(c.segmentation),
            Stage::Augment => json!(c.augmentation),
            Stage::Split => json!(c.split),
            Stage::Train => json!(c.scorer),
            Stage::Adapt => json!(c.adapt),
            Stage::Eval | Stage::Report => json!({}),
            Stage::GradCheck => json!({ "grad_check": c.grad_check, "scorer": c.scorer }),
        })
    }

    /// Runs `body` in a fresh directory and publishes it on success.
    fn run<F>(&self, stage: Stage, body: F) -> Result<Outcome, CliError>
    where
        F: FnOnce(&Path, &Anc) -> Result<Value, CliError>,
    {
        let mut ancestors = BTreeMap::new();
        let mut direct = Vec::new();
        for &dep in stage.deps() {
            let rec = self.record(dep).ok_or_else(|| CliError::StageOrder {
                stage: stage.name().into(),
                needs: dep.name().into(),
                artifact: format!("{}/{}", dep.name(), dep.artifact()),
            })?;
            for (k, v) in &rec.ancestors {
                if let Some(prev) = ancestors.insert(k.clone(), v.clone()) {
                    if &prev != v {
                        return Err(CliError::Invalid(format!(
                            "inputs of `{}` were built from different `{k}` runs; rerun the stages after `{k}`",
                            stage.name()
                        )));
                    }
                }
            }
            ancestors.insert(dep.name().to_string(), rec.hash.clone());
            direct.push((dep.name(), rec.hash));
        }
        for (name, hash) in &ancestors {
            let latest = Stage::from_name(name).and_then(|s| self.record(s));
            if let Some(latest) = latest {
                if &latest.hash != hash {
                    eprintln!("note: `{}` reads an older `{name}` run ({hash}); latest is {}", stage.name(), latest.hash);
                }
            }
        }

        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(b"\n");
        h.update(self.stage_config(stage)?.to_string().as_bytes());
        for (name, hash) in &direct {
            h.update(format!("\n{name}={hash}").as_bytes());
        }
        let hash = hex::encode(h.finalize())[..16].to_string();

        let dir = self.dir(stage, &hash);
        let tmp = self.work.join(format!(".{}-{hash}.tmp", stage.name()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let anc = Anc {
            ctx: self,
            hashes: ancestors.clone(),
        };
        let summary = match body(&tmp, &anc) {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| CliError::io(&dir, e))?;
        let record = StageRecord {
            stage: stage.name().into(),
            hash: hash.clone(),
            ancestors,
            summary: summary.clone(),
        };
        write_json(&self.pointer(stage), &record)?;
        Ok(Outcome {
            stage,
            dir,
            hash,
            summary,
        })
    }
}

/// Directories of the stages a run depends on.
struct Anc<'a> {
    ctx: &'a Ctx,
    hashes: BTreeMap<String, String>,
}

impl Anc<'_> {
    fn dir(&self, stage: Stage) -> PathBuf {
        let hash = &self.hashes[stage.name()];
        self.ctx.dir(stage, hash)
    }

    fn corpus_manifest(&self) -> Result<DatasetManifest, CliError> {
        let info: Value = read_json(&self.dir(Stage::Gen).join("corpus.json"))?;
        let path = self.dir(Stage::Gen).join(info["manifest"].as_str().unwrap_or_default());
        load_manifest_file(&path).map_err(|e| CliError::from_core("corpus manifest", e))
    }

    fn new_manifest(&self) -> Result<DatasetManifest, CliError> {
        load_manifest_file(&self.dir(Stage::Gen).join("new_subjects/manifest.json"))
            .map_err(|e| CliError::from_core("new subject manifest", e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelEntry {
    cohort: String,
    subject_id: String,
    video_id: String,
    task_tag: String,
    path: String,
}

/// One labeled recording with its per-frame features.
struct Labeled {
    intensity: IntensityTrace,
    features: FeatureMatrix,
}

const CORPUS: &str = "corpus";
const NEW: &str = "new_subjects";

fn load_labeled(anc: &Anc<'_>, cohort: &str, map: &EmotionAuMap, exec: Exec) -> Result<Vec<Labeled>, CliError> {
    let label_dir = anc.dir(Stage::Label);
    let index: Vec<LabelEntry> = read_json(&label_dir.join("labels.json"))?;
    let manifest = if cohort == CORPUS {
        anc.corpus_manifest()?
    } else {
        anc.new_manifest()?
    };
    let entries: Vec<LabelEntry> = index.into_iter().filter(|e| e.cohort == cohort).collect();
    exec.try_map(&entries, |e| {
        let intensity = IntensityTrace::from_csv(&read_text(&label_dir.join(&e.path))?)
            .map_err(|err| CliError::Invalid(format!("{}: {err}", e.path)))?;
        let rec = manifest
            .recording(&e.subject_id, &e.video_id)
            .ok_or_else(|| CliError::Invalid(format!("{}/{} missing from manifest", e.subject_id, e.video_id)))?;
        let features = match &rec.features_path {
            Some(p) => FeatureMatrix::from_bytes(&read(p)?).map_err(|err| CliError::from_core(&p.display().to_string(), err))?,
            None => {
                let trace = manifest
                    .load_trace(&e.subject_id, rec)
                    .map_err(|err| CliError::from_core("trace", err))?;
                au_features(&trace, map).map_err(|err| CliError::from_core("features", err))?
            }
        };
        Ok(Labeled {
            intensity,
            features,
        })
    })
}

fn dataset_of(items: &[Labeled], ctx: &Ctx, provenance: &str) -> Result<SegmentDataset, CliError> {
    let recs: Vec<LabeledRecording<'_>> = items
        .iter()
        .map(|l| LabeledRecording {
            intensity: &l.intensity,
            features: &l.features,
        })
        .collect();
    build_dataset(&recs, ctx.cfg.segmentation, provenance, ctx.exec).map_err(|e| CliError::from_core("segment", e))
}

fn read_dataset(dir: &Path) -> Result<SegmentDataset, CliError> {
    SegmentDataset::read_dir(dir).map_err(|e| CliError::from_core(&dir.display().to_string(), e))
}

fn write_dataset(ds: &SegmentDataset, dir: &Path) -> Result<(), CliError> {
    ds.write_dir(dir).map_err(|e| CliError::from_core(&dir.display().to_string(), e))
}

fn load_model(anc: &Anc<'_>) -> Result<ScorerModel, CliError> {
    let path = anc.dir(Stage::Train).join("model.ckpt");
    load_checkpoint(&path)
        .map(|(_, m)| m)
        .map_err(|e| CliError::from_core(&path.display().to_string(), e))
}

fn counts_json(c: &[usize]) -> Value {
    json!(c)
}

pub fn run(ctx: &Ctx, stage: Stage) -> Result<Outcome, CliError> {
    match stage {
        Stage::Gen => ctx.run(stage, |out, _| gen(ctx, out)),
        Stage::Label => ctx.run(stage, |out, anc| label(ctx, out, anc)),
        Stage::Segment => ctx.run(stage, |out, anc| segment(ctx, out, anc)),
        Stage::Augment => ctx.run(stage, |out, anc| augment(ctx, out, anc)),
        Stage::Split => ctx.run(stage, |out, anc| split(ctx, out, anc)),
        Stage::Train => ctx.run(stage, |out, anc| train_stage(ctx, out, anc)),
        Stage::Adapt => ctx.run(stage, |out, anc| adapt_stage(ctx, out, anc)),
        Stage::Eval => ctx.run(stage, |out, anc| eval_stage(ctx, out, anc)),
        Stage::Report => ctx.run(stage, |out, anc| report(out, anc)),
        Stage::GradCheck => ctx.run(stage, |out, anc| grad_check_stage(ctx, out, anc)),
    }
}

fn gen(ctx: &Ctx, out: &Path) -> Result<Value, CliError> {
    let manifest_path = match &ctx.cfg.paths.corpus_dir {
        Some(dir) => fs::canonicalize(dir.join("manifest.json")).map_err(|e| CliError::io(dir, e))?,
        None => {
            gen_corpus(&ctx.cfg.corpus, &out.join(CORPUS), ctx.exec).map_err(|e| CliError::from_core("gen", e))?;
            PathBuf::from(CORPUS).join("manifest.json")
        }
    };
    let new = gen_corpus(&ctx.cfg.new_subjects, &out.join(NEW), ctx.exec).map_err(|e| CliError::from_core("gen", e))?;
    write_json(&out.join("corpus.json"), &json!({ "manifest": manifest_path }))?;
    Ok(json!({
        "new_subjects": new.subjects.len(),
    }))
}

fn label(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let map = ctx.cfg.emotion_map()?;
    let mut index = Vec::new();
    let mut maxima = BTreeMap::new();
    for (cohort, manifest) in [(CORPUS, anc.corpus_manifest()?), (NEW, anc.new_manifest()?)] {
        let results = ctx.exec.try_map(&manifest.subjects, |s| {
            let recs: Vec<_> = s.recordings.iter().filter(|r| map.matches_task(&r.task_tag)).collect();
            let traces = recs
                .iter()
                .map(|r| manifest.load_trace(&s.subject_id, r))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::from_core("label", e))?;
            let (m, labeled) = label_subject(&traces, &map).map_err(|e| CliError::from_core("label", e))?;
            let ids: Vec<(String, String)> = recs.iter().map(|r| (r.video_id.clone(), r.task_tag.clone())).collect();
            Ok::<_, CliError>((s.subject_id.clone(), ids, m, labeled))
        })?;
        for (sid, recs, m, labeled) in results {
            for ((video_id, task_tag), it) in recs.into_iter().zip(&labeled) {
                let path = format!("labels/{cohort}/{sid}/{video_id}.csv");
                write(&out.join(&path), it.to_csv())?;
                index.push(LabelEntry {
                    cohort: cohort.into(),
                    subject_id: sid.clone(),
                    video_id,
                    task_tag,
                    path,
                });
            }
            maxima.insert(sid, m.maxima);
        }
    }
    write_json(&out.join("maxima.json"), &maxima)?;
    write_json(&out.join("labels.json"), &index)?;
    Ok(json!({ "recordings": index.len(), "subjects": maxima.len() }))
}

fn segment(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let map = ctx.cfg.emotion_map()?;
    let corpus = load_labeled(anc, CORPUS, &map, ctx.exec)?;
    let ds = dataset_of(&corpus, ctx, CORPUS)?;
    write_dataset(&ds, &out.join("dataset"))?;
    let new = load_labeled(anc, NEW, &map, ctx.exec)?;
    let nds = dataset_of(&new, ctx, NEW)?;
    write_dataset(&nds, &out.join("new_dataset"))?;
    Ok(json!({
        "windows": ds.len(),
        "new_subject_windows": nds.len(),
        "class_counts": counts_json(&ds.class_counts()),
    }))
}

fn augment(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let map = ctx.cfg.emotion_map()?;
    let a = &ctx.cfg.augmentation;
    let params = TransitionParams {
        smooth_window: a.smooth_window,
        slope_threshold: a.slope_threshold,
    };
    let corpus = load_labeled(anc, CORPUS, &map, ctx.exec)?;
    let base = read_dataset(&anc.dir(Stage::Segment).join("dataset"))?;
    let spans = ctx.exec.map(&corpus, |l| detect_transitions(&l.intensity, params));
    let sources: Vec<TransitionSource<'_>> = corpus
        .iter()
        .zip(&spans)
        .map(|(l, s)| TransitionSource {
            intensity: &l.intensity,
            features: &l.features,
            spans: s,
        })
        .collect();
    let (ds, rep) = augment_transitional(&base, &sources, a.target, a.dense_stride);
    write_dataset(&ds, &out.join("dataset"))?;
    write(&out.join("balance.json"), rep.to_json() + "\n")?;
    write(&out.join("balance.csv"), rep.to_csv())?;
    let all: Vec<_> = spans.iter().flatten().collect();
    write_json(&out.join("transitions.json"), &all)?;
    Ok(json!({
        "augmented": rep.augmented,
        "ratio_before": rep.ratio_before,
        "ratio_after": rep.ratio_after,
        "transitions": all.len(),
    }))
}

fn split(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let ds = read_dataset(&anc.dir(Stage::Augment).join("dataset"))?;
    let s = &ctx.cfg.split;
    let plan = match s.mode {
        SplitMode::Batch => SubjectSplit::by_batch(&anc.corpus_manifest()?),
        SplitMode::Fraction => {
            SubjectSplit::plan(ds.subjects(), s.fraction, s.seed).map_err(|e| CliError::from_core("split", e))?
        }
    };
    if plan.train.is_empty() || plan.val.is_empty() {
        return Err(CliError::Invalid("split leaves an empty side".into()));
    }
    let (train, val) = plan.apply(&ds);
    // Validation keeps only the regular tiling.
    let val = val.filter(|w| !w.augmented);
    write_json(&out.join("split.json"), &plan)?;
    write_dataset(&train, &out.join("train"))?;
    write_dataset(&val, &out.join("val"))?;
    Ok(json!({
        "train_subjects": plan.train.len(),
        "val_subjects": plan.val.len(),
        "train_windows": train.len(),
        "val_windows": val.len(),
    }))
}

fn train_stage(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let ds = read_dataset(&anc.dir(Stage::Split).join("train"))?;
    let cfg = &ctx.cfg.scorer;
    let dims = InputDims {
        t: ds.params.length,
        d: ds.dim,
    };
    let model = init_model(dims, cfg).map_err(|e| CliError::from_core("train", e))?;
    let (model, log) = train(&model, &ds, cfg, ctx.exec).map_err(|e| CliError::from_core("train", e))?;
    save_checkpoint(&out.join("model.ckpt"), &model, cfg).map_err(|e| CliError::from_core("train", e))?;
    let mut csv = String::from("epoch,lr,mean_loss\n");
    for e in &log {
        let _ = writeln!(csv, "{},{:e},{:.6}", e.epoch, e.lr, e.mean_loss);
    }
    write(&out.join("train_log.csv"), csv)?;
    let (header, _) = load_checkpoint(&out.join("model.ckpt")).map_err(|e| CliError::from_core("train", e))?;
    let preds: Vec<u8> = model
        .predict(&ds, ctx.exec)
        .map_err(|e| CliError::from_core("train", e))?
        .iter()
        .map(|p| p.class)
        .collect();
    let acc = evaluate(&preds, &ds.labels()).map_err(|e| CliError::from_core("train", e))?;
    Ok(json!({
        "checksum": header.checksum,
        "windows": ds.len(),
        "final_loss": log.last().map(|e| e.mean_loss),
        "train_exact": acc.exact,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct AdaptSummary {
    k: usize,
    /// Mean over subjects of within-k accuracy per iteration.
    mean_within_k: Vec<f64>,
    mean_exact: Vec<f64>,
    /// Summed label-difference histograms over all subjects.
    before_histogram: Vec<usize>,
    after_histogram: Vec<usize>,
    delta: Vec<i64>,
    curves: Vec<AdaptCurve>,
}

fn adapt_stage(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let model = load_model(anc)?;
    let ds = read_dataset(&anc.dir(Stage::Segment).join("new_dataset"))?;
    let manifest = anc.new_manifest()?;
    let cfg = &ctx.cfg.adapt;
    let results = ctx.exec.try_map(&manifest.subjects, |s| {
        let split = split_neutral_active(s, &ds).map_err(|e| CliError::from_core("adapt", e))?;
        let plan = AdaptPlan::new(split, cfg.clone()).map_err(|e| CliError::from_core("adapt", e))?;
        let (adapted, curve) = adapt(&model, &plan, Exec::Sequential).map_err(|e| CliError::from_core("adapt", e))?;
        let cmp = adapt_compare(&model, &adapted, &plan.split.active, Exec::Sequential)
            .map_err(|e| CliError::from_core("adapt", e))?;
        Ok::<_, CliError>((curve, cmp))
    })?;
    if results.is_empty() {
        return Err(CliError::Invalid("no new subjects to adapt".into()));
    }
    let n = results.len() as f64;
    let len = cfg.iterations + 1;
    let mean = |f: &dyn Fn(&AdaptCurve) -> &Vec<f64>| -> Vec<f64> {
        (0..len).map(|i| results.iter().map(|(c, _)| f(c)[i]).sum::<f64>() / n).collect()
    };
    let mut before = vec![0usize; NUM_CLASSES];
    let mut after = vec![0usize; NUM_CLASSES];
    for (_, cmp) in &results {
        for d in 0..NUM_CLASSES {
            before[d] += cmp.before.histogram[d];
            after[d] += cmp.after.histogram[d];
        }
    }
    let summary = AdaptSummary {
        k: cfg.k,
        mean_within_k: mean(&|c| &c.within_k),
        mean_exact: mean(&|c| &c.exact),
        delta: (0..NUM_CLASSES).map(|d| after[d] as i64 - before[d] as i64).collect(),
        before_histogram: before,
        after_histogram: after,
        curves: results.iter().map(|(c, _)| c.clone()).collect(),
    };
    write_json(&out.join("adapt.json"), &summary)?;
    let mut csv = String::from("iteration,mean_within_k,mean_exact\n");
    for i in 0..len {
        let _ = writeln!(csv, "{i},{:.6},{:.6}", summary.mean_within_k[i], summary.mean_exact[i]);
    }
    write(&out.join("adapt_curve.csv"), csv)?;
    let mut csv = String::from("difference,before,after,delta\n");
    for d in 0..NUM_CLASSES {
        let _ = writeln!(
            csv,
            "{d},{},{},{}",
            summary.before_histogram[d], summary.after_histogram[d], summary.delta[d]
        );
    }
    write(&out.join("adapt_compare.csv"), csv)?;
    Ok(json!({
        "subjects": results.len(),
        "within_k_before": summary.mean_within_k[0],
        "within_k_after": summary.mean_within_k[len - 1],
        "perfect_label_delta": summary.delta[0],
    }))
}

fn eval_stage(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let model = load_model(anc)?;
    let val = read_dataset(&anc.dir(Stage::Split).join("val"))?;
    let preds: Vec<u8> = model
        .predict(&val, ctx.exec)
        .map_err(|e| CliError::from_core("eval", e))?
        .iter()
        .map(|p| p.class)
        .collect();
    let report = evaluate(&preds, &val.labels()).map_err(|e| CliError::from_core("eval", e))?;
    write(&out.join("eval.json"), report.to_json() + "\n")?;
    write(&out.join("eval.csv"), report.to_csv())?;
    write(&out.join("confusion.csv"), report.confusion_csv())?;
    let mut csv = String::from("subject_id,video_id,start,label,predicted\n");
    for (w, p) in val.windows().iter().zip(&preds) {
        let _ = writeln!(csv, "{},{},{},{},{p}", w.subject_id, w.video_id, w.start, w.label);
    }
    write(&out.join("predictions.csv"), csv)?;

    let label_dir = anc.dir(Stage::Label);
    let index: Vec<LabelEntry> = read_json(&label_dir.join("labels.json"))?;
    let traces = index
        .iter()
        .filter(|e| e.cohort == CORPUS)
        .map(|e| {
            IntensityTrace::from_csv(&read_text(&label_dir.join(&e.path))?)
                .map_err(|err| CliError::Invalid(format!("{}: {err}", e.path)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let tagged: Vec<TaggedTrace<'_>> = index
        .iter()
        .filter(|e| e.cohort == CORPUS)
        .zip(&traces)
        .map(|(e, t)| TaggedTrace {
            trace: t,
            task_tag: &e.task_tag,
        })
        .collect();
    let max = max_intensity_by_task(&tagged, &[]).map_err(|e| CliError::from_core("eval", e))?;
    write_json(&out.join("max_intensity.json"), &max)?;
    write(&out.join("max_intensity.csv"), max.to_csv())?;
    Ok(json!({
        "windows": report.n,
        "exact": report.exact,
        "within_2": report.within(2),
        "within_3": report.within(3),
        "task_mean_difference": max.mean_difference,
    }))
}

fn report(out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let eval_dir = anc.dir(Stage::Eval);
    let eval: EvalReport = read_json(&eval_dir.join("eval.json"))?;
    let max: MaxIntensityReport = read_json(&eval_dir.join("max_intensity.json"))?;
    let adapt: AdaptSummary = read_json(&anc.dir(Stage::Adapt).join("adapt.json"))?;
    let balance: BalanceReport = read_json(&anc.dir(Stage::Augment).join("balance.json"))?;

    write(&out.join("histogram.svg"), histogram_svg("Validation label difference", &eval))?;
    let within: Vec<f64> = eval.within_k.clone();
    let cats: Vec<String> = (0..NUM_CLASSES).map(|k| k.to_string()).collect();
    write(
        &out.join("within_k.svg"),
        bar_chart_svg("Validation within-k accuracy", "k", "accuracy", &cats, &[("within k", &within)]),
    )?;
    let label = format!("within-{}", adapt.k);
    write(
        &out.join("adapt_curve.svg"),
        line_chart_svg(
            "Adaptive learning: accuracy on active windows",
            "iteration",
            "accuracy",
            &[(&label, &adapt.mean_within_k), ("exact", &adapt.mean_exact)],
        ),
    )?;
    let before: Vec<f64> = adapt.before_histogram.iter().map(|v| *v as f64).collect();
    let after: Vec<f64> = adapt.after_histogram.iter().map(|v| *v as f64).collect();
    write(
        &out.join("adapt_compare.svg"),
        bar_chart_svg(
            "Label difference before and after adaptation",
            "|predicted - label|",
            "windows",
            &cats,
            &[("before", &before), ("after", &after)],
        ),
    )?;
    let b: Vec<f64> = balance.before.iter().map(|v| *v as f64).collect();
    let a: Vec<f64> = balance.after.iter().map(|v| *v as f64).collect();
    write(
        &out.join("class_balance.svg"),
        bar_chart_svg("Class counts", "class", "windows", &cats, &[("before", &b), ("after", &a)]),
    )?;
    let tasks: Vec<String> = max.groups.iter().map(|g| g.task.clone()).collect();
    let means: Vec<f64> = max.groups.iter().map(|g| g.mean).collect();
    write(
        &out.join("max_intensity.svg"),
        bar_chart_svg("Mean per-subject max intensity", "task", "intensity", &tasks, &[("mean", &means)]),
    )?;
    let last = adapt.mean_within_k.len() - 1;
    let summary = json!({
        "validation_windows": eval.n,
        "exact": eval.exact,
        "within_2": eval.within(2),
        "within_3": eval.within(3),
        "augmented_windows": balance.augmented,
        "class_ratio_after": balance.ratio_after,
        "adapt_within_k_before": adapt.mean_within_k[0],
        "adapt_within_k_after": adapt.mean_within_k[last],
        "adapt_perfect_label_delta": adapt.delta[0],
        "task_mean_difference": max.mean_difference,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn grad_check_stage(ctx: &Ctx, out: &Path, anc: &Anc<'_>) -> Result<Value, CliError> {
    let ds = read_dataset(&anc.dir(Stage::Split).join("train"))?;
    let g = &ctx.cfg.grad_check;
    let dims = InputDims {
        t: ds.params.length,
        d: ds.dim,
    };
    let model = init_model(dims, &ctx.cfg.scorer).map_err(|e| CliError::from_core("grad-check", e))?;
    let all = dataset_samples(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut idx = sample(&mut rng, all.len(), g.batch.min(all.len())).into_vec();
    idx.sort_unstable();
    let batch: Vec<_> = idx.iter().map(|&i| all[i]).collect();
    let err = grad_check(&model, &batch, g.epsilon, g.seed).map_err(|e| CliError::from_core("grad-check", e))?;
    let summary = json!({ "max_relative_error": err, "epsilon": g.epsilon, "batch": batch.len(), "passed": err < 1e-4 });
    write_json(&out.join("grad_check.json"), &summary)?;
    if err >= 1e-4 {
        return Err(CliError::Invalid(format!("gradient check failed: max relative error {err:e}")));
    }
    Ok(summary)
}
