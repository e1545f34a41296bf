mod common;

use std::collections::HashSet;

use common::Corpus;
use intensity_core::augmentation::{
    augment_transitional, class_ratio, detect_transitions, BalanceTarget, TransitionParams, TransitionSource,
};
use intensity_core::exec::Exec;
use intensity_core::ingest::FeatureMatrix;
use intensity_core::labeling::{quantize_intensity, IntensityTrace};
use intensity_core::segmentation::{build_dataset, LabeledRecording, WindowParams};
use intensity_core::synth::CorpusConfig;
use proptest::prelude::*;

/// Piecewise-linear intensity through random knots, with random dropouts.
fn arb_trace(video: usize) -> impl Strategy<Value = IntensityTrace> {
    (
        prop::collection::vec(0.0f64..=1.0, 2..8),
        40usize..200,
        prop::collection::vec(any::<prop::sample::Index>(), 0..4),
    )
        .prop_map(move |(knots, n, holes)| {
            let seg = (n - 1) as f64 / (knots.len() - 1) as f64;
            let intensity: Vec<f64> = (0..n)
                .map(|t| {
                    let x = t as f64 / seg;
                    let i = (x.floor() as usize).min(knots.len() - 2);
                    let f = x - i as f64;
                    let v = knots[i] + (knots[i + 1] - knots[i]) * f;
                    (v * 1e6).round() / 1e6
                })
                .collect();
            let mut valid = vec![true; n];
            for h in holes {
                let at = h.index(n);
                for v in valid.iter_mut().skip(at).take(3) {
                    *v = false;
                }
            }
            let label = intensity.iter().map(|x| quantize_intensity(*x).unwrap()).collect();
            IntensityTrace {
                subject_id: format!("s{}", video % 3),
                video_id: format!("v{video}"),
                first_frame: 0,
                intensity,
                label,
                valid,
            }
        })
}

fn features_of(it: &IntensityTrace) -> FeatureMatrix {
    let data = it.intensity.iter().flat_map(|x| [*x as f32, 1.0 - *x as f32]).collect();
    FeatureMatrix::new(it.len(), 2, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_invariants(traces in (arb_trace(0), arb_trace(1), arb_trace(2), arb_trace(3))) {
        let traces = [traces.0, traces.1, traces.2, traces.3];
        let feats: Vec<FeatureMatrix> = traces.iter().map(features_of).collect();
        let recs: Vec<_> = traces.iter().zip(&feats).map(|(intensity, features)| LabeledRecording { intensity, features }).collect();
        let params = WindowParams { length: 8, stride: 4 };
        let base = build_dataset(&recs, params, "p", Exec::Sequential).unwrap();
        let tp = TransitionParams { smooth_window: 3, slope_threshold: 0.005 };
        let spans: Vec<_> = traces.iter().map(|t| detect_transitions(t, tp)).collect();
        let sources: Vec<_> = traces.iter().zip(&feats).zip(&spans)
            .map(|((intensity, features), spans)| TransitionSource { intensity, features, spans })
            .collect();
        let (aug, rep) = augment_transitional(&base, &sources, BalanceTarget::MatchLargest, 1);

        let before = base.class_counts();
        let after = aug.class_counts();
        prop_assert_eq!(&rep.before[..], &before[..]);
        prop_assert_eq!(&rep.after[..], &after[..]);
        let added: usize = before.iter().zip(&after).map(|(b, a)| a - b).sum();
        prop_assert_eq!(rep.augmented, added);
        prop_assert_eq!(rep.augmented, rep.augmented_rising + rep.augmented_falling);
        prop_assert!(before.iter().zip(&after).all(|(b, a)| a >= b));
        // never past the largest class, never a worse ratio
        let largest = before.iter().max().copied().unwrap_or(0);
        prop_assert!(after.iter().all(|a| *a <= largest.max(1)));
        if let (Some(rb), Some(ra)) = (class_ratio(&before), class_ratio(&after)) {
            prop_assert!(ra <= rb + 1e-12);
        }

        // base windows kept in order, no duplicate keys
        prop_assert_eq!(&aug.windows()[..base.len()], base.windows());
        let keys: HashSet<_> = aug.windows().iter().map(|w| w.key()).collect();
        prop_assert_eq!(keys.len(), aug.len());

        for (i, w) in aug.windows().iter().enumerate().skip(base.len()) {
            prop_assert!(w.augmented);
            let k = traces.iter().position(|t| t.video_id == w.video_id).unwrap();
            let t = &traces[k];
            let last = w.start + params.length - 1;
            prop_assert!(t.valid[w.start..=last].iter().all(|v| *v));
            prop_assert_eq!(w.label, t.label[last]);
            prop_assert_eq!(aug.features(i), &feats[k].data[w.start * 2..(last + 1) * 2]);
            prop_assert!(spans[k].iter().any(|s| s.start <= last && last < s.end));
        }
    }
}

#[test]
fn default_corpus_class_shares_after_augmentation() {
    let c = Corpus::generate(&CorpusConfig::default());
    let base = c.dataset();
    let spans: Vec<_> = c.traces.iter().map(|t| detect_transitions(t, TransitionParams::default())).collect();
    let sources: Vec<_> = c
        .traces
        .iter()
        .zip(&c.features)
        .zip(&spans)
        .map(|((intensity, features), spans)| TransitionSource { intensity, features, spans })
        .collect();
    let (aug, rep) = augment_transitional(&base, &sources, BalanceTarget::MatchLargest, 1);
    let n = aug.len() as f64;
    for (class, count) in aug.class_counts().iter().enumerate() {
        let share = *count as f64 / n;
        assert!((1.0 / 22.0..=2.0 / 11.0).contains(&share), "class {class}: share {share:.4}");
    }
    assert!(rep.ratio_after.unwrap() <= 2.0);
    assert!(rep.augmented_rising > 0 && rep.augmented_falling > 0);
}
