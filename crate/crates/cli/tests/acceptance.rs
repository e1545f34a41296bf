//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use intensity_core::adaptive::{adapt, adapt_compare, split_neutral_active, AdaptConfig, AdaptPlan};
use intensity_core::augmentation::{augment_transitional, class_ratio, detect_transitions, BalanceTarget, TransitionParams, TransitionSource};
use intensity_core::evaluation::evaluate;
use intensity_core::exec::Exec;
use intensity_core::ingest::{load_manifest_file, AuTrace, DatasetManifest, FeatureMatrix};
use intensity_core::labeling::{label_subject, quantize_intensity, EmotionAuMap, IntensityTrace, NUM_CLASSES};
use intensity_core::scorer::{dataset_samples, grad_check, init_model, train, train_samples, InputDims, Sample, ScorerConfig};
use intensity_core::segmentation::{au_features, build_dataset, segment_windows, LabeledRecording, SegmentDataset, SubjectSplit, WindowParams};
use intensity_core::synth::{gen_corpus, parse_ground_truth, CorpusConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// A generated corpus with every recording labeled and featurized.
struct Labeled {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    traces: Vec<IntensityTrace>,
    features: Vec<FeatureMatrix>,
    tags: Vec<String>,
    ground_truth: Vec<Vec<f64>>,
}

impl Labeled {
    fn generate(cfg: &CorpusConfig) -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        gen_corpus(cfg, dir.path(), Exec::default()).map_err(|e| e.to_string())?;
        let manifest = load_manifest_file(&dir.path().join("manifest.json")).map_err(|e| e.to_string())?;
        let map = EmotionAuMap::happiness();
        let mut out = Labeled {
            _dir: dir,
            manifest: manifest.clone(),
            traces: Vec::new(),
            features: Vec::new(),
            tags: Vec::new(),
            ground_truth: Vec::new(),
        };
        for s in &manifest.subjects {
            let raw: Vec<AuTrace> = s
                .recordings
                .iter()
                .map(|r| manifest.load_trace(&s.subject_id, r))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let (_, labeled) = label_subject(&raw, &map).map_err(|e| e.to_string())?;
            for (r, it) in s.recordings.iter().zip(labeled) {
                let fpath = r.features_path.as_ref().ok_or("synthetic recording without features")?;
                let features = FeatureMatrix::from_bytes(&fs::read(fpath).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
                let gt_path = r.trace_path.with_file_name("ground_truth.csv");
                let gt = parse_ground_truth(&fs::read_to_string(gt_path).map_err(|e| e.to_string())?)
                    .ok_or("bad ground truth file")?;
                out.traces.push(it);
                out.features.push(features);
                out.tags.push(r.task_tag.clone());
                out.ground_truth.push(gt);
            }
        }
        Ok(out)
    }

    fn dataset(&self) -> Result<SegmentDataset, String> {
        let recs: Vec<_> = self
            .traces
            .iter()
            .zip(&self.features)
            .map(|(intensity, features)| LabeledRecording { intensity, features })
            .collect();
        build_dataset(&recs, WindowParams::default(), "acceptance", Exec::default()).map_err(|e| e.to_string())
    }
}

fn labeling_identity() -> Check {
    let mut cfg = CorpusConfig::default();
    cfg.subject.noise_sd = 0.0;
    cfg.subject.baseline_max = 0.0;
    let corpus = Labeled::generate(&cfg)?;
    let (mut frames, mut hits) = (0usize, 0usize);
    for (it, gt) in corpus.traces.iter().zip(&corpus.ground_truth) {
        ensure(gt.len() == it.len(), "ground truth length differs")?;
        for t in 0..it.len() {
            if it.valid[t] {
                frames += 1;
                hits += usize::from(it.label[t] as f64 == (10.0 * gt[t]).round());
            }
        }
    }
    ensure(frames > 0 && hits == frames, format!("{hits}/{frames} valid frames match"))?;
    Ok(format!("{hits}/{frames} valid frames equal round(10 g)"))
}

fn scale_invariance() -> Check {
    let corpus_cfg = CorpusConfig {
        n_subjects: 6,
        batch_one_subjects: 3,
        ..CorpusConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = gen_corpus(&corpus_cfg, dir.path(), Exec::Sequential).map_err(|e| e.to_string())?;
    let manifest = load_manifest_file(&dir.path().join("manifest.json")).unwrap_or(manifest);
    let map = EmotionAuMap::happiness();
    let mut compared = 0;
    for s in &manifest.subjects {
        let raw: Vec<AuTrace> = s
            .recordings
            .iter()
            .map(|r| manifest.load_trace(&s.subject_id, r))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let (_, base) = label_subject(&raw, &map).map_err(|e| e.to_string())?;
        for c in [0.25, 0.5, 0.9] {
            let scaled: Vec<AuTrace> = raw
                .iter()
                .map(|t| t.map_values(|_, v| v * c))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let (_, out) = label_subject(&scaled, &map).map_err(|e| e.to_string())?;
            for (a, b) in base.iter().zip(&out) {
                ensure(a.label == b.label, format!("{} labels change at c={c}", a.video_id))?;
                let bits = |x: &IntensityTrace| x.intensity.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                ensure(bits(a) == bits(b), format!("{} intensities change at c={c}", a.video_id))?;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} traces bit-identical under c in {{0.25, 0.5, 0.9}}"))
}

/// Starts whose window is fully valid and sits a multiple of `stride` after
/// the start of its run.
fn brute_force_windows(valid: &[bool], length: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for s in 0..valid.len() {
        if s + length > valid.len() || !valid[s..s + length].iter().all(|v| *v) {
            continue;
        }
        let mut run_start = s;
        while run_start > 0 && valid[run_start - 1] {
            run_start -= 1;
        }
        if (s - run_start) % stride == 0 {
            out.push(s);
        }
    }
    out
}

fn windowing_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c1e);
    for case in 0..1000 {
        let len = rng.random_range(0..=1000);
        let density: f64 = rng.random_range(0.5..1.0);
        let mask: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
        let length = rng.random_range(1..=40);
        let stride = rng.random_range(1..=20);
        let got = segment_windows(&mask, length, stride);
        ensure(
            got == brute_force_windows(&mask, length, stride),
            format!("case {case}: len {len}, T {length}, stride {stride}"),
        )?;
    }
    let starts = segment_windows(&[true; 200], 16, 6);
    for w in starts.windows(2) {
        let overlap = (w[0] + 16).saturating_sub(w[1]);
        ensure(overlap == 10, format!("overlap {overlap} between {} and {}", w[0], w[1]))?;
    }
    Ok(format!("1000 random cases match; {} consecutive pairs overlap 10 frames", starts.len() - 1))
}

fn flat_trace(subject: &str, video: &str, frames: usize) -> AuTrace {
    let rows = (0..frames).map(|t| vec![0.2 + 0.001 * (t % 7) as f64; 4]).collect();
    AuTrace::new(
        subject,
        video,
        ["AU6L", "AU6R", "AU12L", "AU12R"].map(String::from).to_vec(),
        rows,
        vec![true; frames],
    )
    .expect("valid trace")
}

fn segment_arithmetic() -> Check {
    // 26 plateau subjects x 3 videos, 15 pulse subjects x 2 videos.
    let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
    let mut long = 42;
    for i in 0..26 {
        let lens = (0..3)
            .map(|_| {
                if long > 0 {
                    long -= 1;
                    286
                } else {
                    280
                }
            })
            .collect();
        plan.push((format!("t{i:02}"), lens));
    }
    let mut long = 18;
    for i in 0..15 {
        let lens = (0..2)
            .map(|_| {
                if long > 0 {
                    long -= 1;
                    412
                } else {
                    406
                }
            })
            .collect();
        plan.push((format!("v{i:02}"), lens));
    }
    let map = EmotionAuMap::happiness();
    let mut traces = Vec::new();
    let mut features = Vec::new();
    for (sid, lens) in &plan {
        let raw: Vec<AuTrace> = lens
            .iter()
            .enumerate()
            .map(|(k, &n)| flat_trace(sid, &format!("r{k}"), n))
            .collect();
        let (_, labeled) = label_subject(&raw, &map).map_err(|e| e.to_string())?;
        for (r, it) in raw.iter().zip(labeled) {
            features.push(au_features(r, &map).map_err(|e| e.to_string())?);
            traces.push(it);
        }
    }
    let recs: Vec<_> = traces
        .iter()
        .zip(&features)
        .map(|(intensity, features)| LabeledRecording { intensity, features })
        .collect();
    let ds = build_dataset(&recs, WindowParams::default(), "arithmetic", Exec::default()).map_err(|e| e.to_string())?;
    let split = SubjectSplit {
        train: plan.iter().filter(|p| p.0.starts_with('t')).map(|p| p.0.clone()).collect(),
        val: plan.iter().filter(|p| p.0.starts_with('v')).map(|p| p.0.clone()).collect(),
    };
    let (tr, val) = split.apply(&ds);
    ensure(tr.len() == 3552 && val.len() == 1998, format!("{} train / {} val", tr.len(), val.len()))?;
    Ok("3552 train / 1998 validation windows".into())
}

fn augmentation_balance() -> Check {
    let corpus = Labeled::generate(&CorpusConfig::default())?;
    let base = corpus.dataset()?;
    let counts = base.class_counts();
    let mid: usize = counts[3..=7].iter().sum();
    let share = mid as f64 / base.len() as f64;
    ensure((0.2..=0.35).contains(&share), format!("mid-band share {share:.3} not near a quarter"))?;

    let spans: Vec<_> = corpus
        .traces
        .iter()
        .map(|t| detect_transitions(t, TransitionParams::default()))
        .collect();
    let sources: Vec<_> = corpus
        .traces
        .iter()
        .zip(&corpus.features)
        .zip(&spans)
        .map(|((intensity, features), spans)| TransitionSource { intensity, features, spans })
        .collect();
    let (aug, report) = augment_transitional(&base, &sources, BalanceTarget::MatchLargest, 1);
    let ratio = class_ratio(&aug.class_counts()).ok_or("no classes")?;
    ensure(ratio <= 2.0, format!("ratio after {ratio:.3}"))?;
    ensure(report.augmented > 0, "nothing augmented")?;

    let t = aug.params.length;
    let mut checked = 0;
    for (i, w) in aug.windows().iter().enumerate().filter(|(_, w)| w.augmented) {
        let k = corpus
            .traces
            .iter()
            .position(|it| it.subject_id == w.subject_id && it.video_id == w.video_id)
            .ok_or("augmented window without source")?;
        let it = &corpus.traces[k];
        let last = w.start + t - 1;
        ensure(it.valid[w.start..=last].iter().all(|v| *v), "augmented window covers invalid frames")?;
        let relabel = quantize_intensity(it.intensity[last]).map_err(|e| e.to_string())?;
        ensure(relabel == w.label, format!("{}/{}@{} relabels to {relabel}", w.subject_id, w.video_id, w.start))?;
        let d = corpus.features[k].cols;
        ensure(
            aug.features(i) == &corpus.features[k].data[w.start * d..(last + 1) * d],
            "augmented features differ from source",
        )?;
        checked += 1;
    }
    Ok(format!(
        "mid share {:.1}%, ratio {:.2} -> {ratio:.2}, {checked} augmented labels recomputed",
        share * 100.0,
        report.ratio_before.unwrap_or(f64::NAN)
    ))
}

fn gradient_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ad);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let dims = InputDims {
            t: rng.random_range(1..=8),
            d: rng.random_range(1..=6),
        };
        let cfg = ScorerConfig {
            hidden_units: rng.random_range(1..=24),
            seed: case,
            ..ScorerConfig::default()
        };
        let model = init_model(dims, &cfg).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=8);
        let xs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dims.size()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let batch: Vec<Sample<'_>> = xs
            .iter()
            .map(|x| Sample {
                features: x,
                label: rng.random_range(0..NUM_CLASSES as u8),
            })
            .collect();
        let err = grad_check(&model, &batch, 1e-5, case).map_err(|e| e.to_string())?;
        ensure(err < 1e-4, format!("case {case}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 configurations, worst relative error {worst:.2e}"))
}

fn overfit_sanity() -> Check {
    let corpus = Labeled::generate(&CorpusConfig::default())?;
    let ds = corpus.dataset()?;
    let all = dataset_samples(&ds);
    let step = all.len() / 50;
    let samples: Vec<Sample<'_>> = (0..50).map(|i| all[i * step]).collect();
    let cfg = ScorerConfig {
        learning_rate: 0.05,
        lr_gamma: 1.0,
        epochs: 200,
        batch_size: 25,
        standardize_inputs: true,
        seed: 3,
        ..ScorerConfig::default()
    };
    let dims = InputDims { t: ds.params.length, d: ds.dim };
    let init = init_model(dims, &cfg).map_err(|e| e.to_string())?;
    let (model, log) = train_samples(&init, &samples, &cfg, Exec::default()).map_err(|e| e.to_string())?;
    let correct = samples
        .iter()
        .filter(|s| model.forward(s.features).map(|p| p.class == s.label).unwrap_or(false))
        .count();
    ensure(correct == 50, format!("{correct}/50 training windows correct after 200 epochs"))?;
    let (again, _) = train_samples(&init, &samples, &cfg, Exec::Sequential).map_err(|e| e.to_string())?;
    let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(model.params()) == bits(again.params()), "training is not bit-deterministic")?;
    Ok(format!(
        "50/50 correct, final loss {:.4}, reruns bit-identical",
        log.last().map_or(f64::NAN, |e| e.mean_loss)
    ))
}

fn adaptive_learning() -> Check {
    let corpus = Labeled::generate(&CorpusConfig::default())?;
    let ds = corpus.dataset()?;
    let (tr, _) = SubjectSplit::by_batch(&corpus.manifest).apply(&ds);
    let cfg = ScorerConfig {
        learning_rate: 0.01,
        ..ScorerConfig::default()
    };
    let model = init_model(InputDims { t: tr.params.length, d: tr.dim }, &cfg).map_err(|e| e.to_string())?;
    let (model, _) = train(&model, &tr, &cfg, Exec::default()).map_err(|e| e.to_string())?;

    let mut held_cfg = CorpusConfig {
        n_subjects: 10,
        batch_one_subjects: 10,
        id_prefix: "h".into(),
        seed: 99,
        ..CorpusConfig::default()
    };
    held_cfg.subject.offset_range = (0.45, 0.45);
    let held = Labeled::generate(&held_cfg)?;
    let held_ds = held.dataset()?;
    let adapt_cfg = AdaptConfig {
        fine_tune: cfg.clone(),
        ..AdaptConfig::default()
    };
    ensure(adapt_cfg.iterations <= 5, "more than five iterations")?;
    let t = held_ds.params.length;
    let (mut gain, mut bin0) = (0.0, 0i64);
    for s in &held.manifest.subjects {
        let split = split_neutral_active(s, &held_ds).map_err(|e| e.to_string())?;
        // Evaluation windows never touch a neutral span and never repeat an
        // adaptation window.
        let neutral: HashSet<_> = split.neutral.windows().iter().map(|w| (w.video_id.clone(), w.start)).collect();
        for w in split.active.windows() {
            ensure(!neutral.contains(&(w.video_id.clone(), w.start)), "active window reused for adaptation")?;
            let rec = s.recordings.iter().find(|r| r.video_id == w.video_id).ok_or("unknown video")?;
            let span = rec.neutral_span.ok_or("missing neutral span")?;
            let (a, b) = (w.start as u64, (w.start + t) as u64);
            ensure(b <= span.start || a >= span.end, "active window overlaps the neutral span")?;
        }
        let plan = AdaptPlan::new(split, adapt_cfg.clone()).map_err(|e| e.to_string())?;
        let (adapted, curve) = adapt(&model, &plan, Exec::default()).map_err(|e| e.to_string())?;
        let cmp = adapt_compare(&model, &adapted, &plan.split.active, Exec::default()).map_err(|e| e.to_string())?;
        ensure(cmp.before.n == plan.split.active.len(), "comparison not on active windows")?;
        gain += curve.gain();
        bin0 += cmp.delta[0];
    }
    let gain = gain / held.manifest.subjects.len() as f64;
    ensure(gain >= 0.10, format!("mean within-2 gain {:.1} points", gain * 100.0))?;
    ensure(bin0 > 0, format!("bin-0 change {bin0}"))?;
    Ok(format!("within-2 +{:.1} points over 10 held-out subjects, bin-0 +{bin0}", gain * 100.0))
}

fn metric_correctness() -> Check {
    let r = evaluate(&[0, 1, 2, 5, 10], &[0, 2, 2, 3, 0]).map_err(|e| e.to_string())?;
    ensure(r.n == 5 && r.exact == 0.4, "exact")?;
    let want = [0.4, 0.6, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 1.0];
    ensure(r.within_k == want, format!("within_k {:?}", r.within_k))?;
    ensure(r.histogram == [2, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1], format!("histogram {:?}", r.histogram))?;
    ensure(r.confusion[3][5] == 1 && r.confusion[0][10] == 1 && r.confusion[2][1] == 1, "confusion")?;
    let r = evaluate(&[7; 4], &[7; 4]).map_err(|e| e.to_string())?;
    ensure(r.exact == 1.0 && r.within_k.iter().all(|v| *v == 1.0), "perfect predictions")?;
    ensure(evaluate(&[1], &[1, 2]).is_err() && evaluate(&[], &[]).is_err() && evaluate(&[11], &[0]).is_err(), "bad input accepted")?;

    let mut runner = TestRunner::new(PtConfig {
        cases: 500,
        ..PtConfig::default()
    });
    let pairs = prop::collection::vec((0u8..11, 0u8..11), 1..200);
    runner
        .run(&pairs, |pairs| {
            let (p, l): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let r = evaluate(&p, &l).unwrap();
            prop_assert!(r.within_k.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r.within_k[10], 1.0);
            prop_assert_eq!(r.within_k[0], r.exact);
            prop_assert_eq!(r.histogram.iter().sum::<usize>(), r.n);
            prop_assert_eq!(r.confusion.iter().flatten().sum::<usize>(), r.n);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("fixtures exact; 500 random cases monotone, within-10 = 1, histogram sums to n".into())
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap_or_default();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn end_to_end_cli() -> Check {
    let stages = ["gen", "label", "segment", "augment", "split", "train", "eval", "adapt", "report"];
    let seeded = ["gen", "split", "train", "adapt"];
    let mut runs = Vec::new();
    let mut elapsed = Duration::ZERO;
    for _ in 0..2 {
        let work = tempfile::tempdir().map_err(|e| e.to_string())?;
        let t0 = Instant::now();
        for stage in stages {
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_intensity"));
            cmd.arg(stage).arg("--work-dir").arg(work.path());
            if seeded.contains(&stage) {
                cmd.args(["--seed", "42"]);
            }
            let out = cmd.output().map_err(|e| e.to_string())?;
            ensure(
                out.status.success(),
                format!("`{stage}` failed: {}", String::from_utf8_lossy(&out.stderr)),
            )?;
        }
        elapsed = elapsed.max(t0.elapsed());
        runs.push(tree(work.path()));
    }
    ensure(elapsed < Duration::from_secs(300), format!("slowest run took {elapsed:?}"))?;
    ensure(!runs[0].is_empty() && runs[0] == runs[1], "runs differ")?;
    Ok(format!("{} files byte-identical across two runs, slowest {:.1}s", runs[0].len(), elapsed.as_secs_f64()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("labeling identity", labeling_identity),
        ("scale invariance", scale_invariance),
        ("windowing oracle", windowing_oracle),
        ("segment-count arithmetic", segment_arithmetic),
        ("augmentation balance", augmentation_balance),
        ("gradient correctness", gradient_correctness),
        ("overfit sanity", overfit_sanity),
        ("adaptive learning", adaptive_learning),
        ("metric correctness", metric_correctness),
        ("end-to-end CLI", end_to_end_cli),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{}/{} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
