mod support;

use cbdrive_core::concepts::concept_scores;
use cbdrive_core::data::{generate_synthetic, SyntheticSpec};
use cbdrive_core::explain::{
    aggregate_top_concepts, content_word_overlap, default_stopwords, detect_spikes,
    difference_z_scores, explain_sequence, reveal_decision, scene_explain_rate, Direction,
    ExplainMode, ExplainOptions, SpikeEvent,
};
use cbdrive_core::model::{ModelConfig, Task};
use cbdrive_core::rng::rng_from_seed;
use cbdrive_core::{ConceptScoreMatrix, ModelParams};
use proptest::prelude::*;
use support::*;

fn matrix(m: &Mat) -> ConceptScoreMatrix {
    ConceptScoreMatrix {
        scores: tensor(m),
        frame_index: (0..m.len()).collect(),
    }
}

#[test]
fn aggregation_matches_brute_force_count() {
    let mut rng = rng_from_seed(17);
    for case in 0..100 {
        let frames = 1 + case % 47;
        let k = 1 + (case * 7) % 31;
        let window = 1 + case % 23;
        let k_per_frame = 1 + case % 12;
        let m = random_matrix(&mut rng, frames, k, -1.0, 1.0);
        let texts: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let got = aggregate_top_concepts(&matrix(&m), &texts, window, k_per_frame).unwrap();
        let want = aggregate_oracle(&m, window, k_per_frame);
        assert_eq!(got.len(), want.len());
        for (g, (start, end, top)) in got.iter().zip(&want) {
            assert_eq!((g.start, g.end), (*start, *end));
            let pairs: Vec<(usize, f64)> = g.top3.iter().map(|c| (c.concept, c.fraction)).collect();
            assert_eq!(&pairs, top);
            for c in &g.top3 {
                assert_eq!(c.text, texts[c.concept]);
            }
            let total: f64 = g.fractions.iter().sum();
            assert!((total - k_per_frame.min(k) as f64).abs() < 1e-9);
            assert!(g.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
            let smallest_top = g
                .top3
                .iter()
                .map(|c| c.fraction)
                .fold(f64::INFINITY, f64::min);
            let in_top: Vec<usize> = g.top3.iter().map(|c| c.concept).collect();
            for (c, f) in g.fractions.iter().enumerate() {
                if !in_top.contains(&c) {
                    assert!(*f <= smallest_top);
                }
            }
        }
    }
}

#[test]
fn window_of_zero_frames_is_rejected() {
    let m = vec![vec![0.1, 0.2]];
    assert!(aggregate_top_concepts(&matrix(&m), &["a".into(), "b".into()], 0, 1).is_err());
}

fn series_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 8..60)
}

proptest! {
    #[test]
    fn spike_z_scores_ignore_affine_rescaling(series in series_strategy(), a in 1e-3f64..1e3, b in -10.0f64..10.0) {
        let moved: Vec<f64> = series.iter().map(|x| a * x + b).collect();
        match (difference_z_scores(&series), difference_z_scores(&moved)) {
            (Some(z0), Some(z1)) => {
                for (x, y) in z0.iter().zip(&z1) {
                    prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
                }
                let e0 = detect_spikes(&series, 2.5, 4).unwrap();
                let e1 = detect_spikes(&moved, 2.5, 4).unwrap();
                let frames = |e: &[SpikeEvent]| e.iter().map(|s| (s.frame, s.direction)).collect::<Vec<_>>();
                prop_assert_eq!(frames(&e0), frames(&e1));
            }
            (None, None) => {}
            _ => prop_assert!(false, "spread detection changed under rescaling"),
        }
    }

    #[test]
    fn mirrored_series_flip_direction(series in series_strategy()) {
        let mirrored: Vec<f64> = series.iter().map(|x| -x).collect();
        let e0 = detect_spikes(&series, 2.5, 4).unwrap();
        let e1 = detect_spikes(&mirrored, 2.5, 4).unwrap();
        prop_assert_eq!(e0.len(), e1.len());
        for (a, b) in e0.iter().zip(&e1) {
            prop_assert_eq!(a.frame, b.frame);
            prop_assert_ne!(a.direction, b.direction);
        }
    }

    #[test]
    fn events_are_valid_frames_and_spaced(series in series_strategy(), gap in 1usize..8) {
        let events = detect_spikes(&series, 2.5, gap).unwrap();
        for e in &events {
            prop_assert!(e.frame >= 1 && e.frame < series.len());
            prop_assert!(e.z.abs() >= 2.5);
        }
        for w in events.windows(2) {
            prop_assert!(w[1].frame - w[0].frame >= gap);
        }
    }

    #[test]
    fn reveals_never_precede_their_event(
        frames in 8usize..60,
        at in prop::collection::btree_set(0usize..60, 0..6),
        hold_off in 0usize..8,
    ) {
        let events: Vec<SpikeEvent> = at
            .into_iter()
            .filter(|&f| f < frames)
            .map(|frame| SpikeEvent { frame, direction: Direction::Rise, z: 3.0 })
            .collect();
        let flags = reveal_decision(&events, &[], frames, hold_off);
        prop_assert_eq!(flags.len(), frames);
        for f in &flags {
            let covered = events.iter().any(|e| e.frame <= f.frame && f.frame <= e.frame + hold_off);
            prop_assert_eq!(f.reveal, covered);
        }
    }
}

#[test]
fn constant_series_has_no_events() {
    assert!(detect_spikes(&[0.3; 20], 2.5, 4).unwrap().is_empty());
}

#[test]
fn single_step_is_one_rise_at_the_step() {
    let mut series: Vec<f64> = (0..20).map(|t| 0.1 + 0.001 * (t % 3) as f64).collect();
    for v in &mut series[12..] {
        *v += 0.5;
    }
    let events = detect_spikes(&series, 2.5, 4).unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].frame, 12);
    assert_eq!(events[0].direction, Direction::Rise);
}

#[test]
fn short_series_are_rejected() {
    assert!(detect_spikes(&[0.1; 7], 2.5, 4).is_err());
}

#[test]
fn spike_at_ten_reveals_ten_through_fourteen() {
    let m: Mat = (0..20)
        .map(|t| (0..5).map(|c| ((c * 3 + t) % 5) as f64).collect())
        .collect();
    let texts: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
    let windows = aggregate_top_concepts(&matrix(&m), &texts, 8, 2).unwrap();
    let ev = SpikeEvent {
        frame: 10,
        direction: Direction::Drop,
        z: -4.0,
    };
    let flags = reveal_decision(&[ev], &windows, 20, 4);
    let on: Vec<usize> = flags.iter().filter(|f| f.reveal).map(|f| f.frame).collect();
    assert_eq!(on, vec![10, 11, 12, 13, 14]);
    for f in &flags {
        match &f.concepts {
            Some(c) => assert_eq!(c, &windows[f.frame / 8].top3),
            None => assert!(!f.reveal),
        }
    }
    assert!(reveal_decision(&[], &windows, 20, 4)
        .iter()
        .all(|f| !f.reveal && f.concepts.is_none()));
}

#[test]
fn caption_style_overlap() {
    let sw = default_stopwords();
    let o = content_word_overlap(
        &["a photo of pedestrians crossing"],
        "Wait at intersection, peds on sidewalk, bicycle crossing",
        &sw,
    )
    .unwrap();
    assert!(o.hit && o.top1_hit);
    assert_eq!(
        o.matched.into_iter().collect::<Vec<_>>(),
        vec!["crossing".to_string()]
    );
    let none = content_word_overlap(&["a photo of the"], "the of a with", &sw).unwrap();
    assert!(!none.hit);
    let same = content_word_overlap(&["wet road at night"], "wet road at night", &sw).unwrap();
    assert_eq!(same.matched.len(), 3);
    let second = content_word_overlap(
        &["a photo of a truck", "a photo of a cyclist"],
        "cyclist ahead",
        &sw,
    )
    .unwrap();
    assert!(second.hit && !second.top1_hit);
    assert!(content_word_overlap(&["x"], "  ", &sw).is_err());
}

#[test]
fn noiseless_synthetic_scenes_are_fully_explained() {
    let ds = generate_synthetic(&SyntheticSpec {
        n_sequences: 40,
        noise_std: 0.0,
        ..Default::default()
    })
    .unwrap();
    let r = scene_explain_rate(
        &ds.sequences,
        &ds.concepts,
        ExplainMode::Top3,
        &ExplainOptions::default(),
    )
    .unwrap();
    assert_eq!(r.scored, 40);
    assert_eq!(r.rate, 1.0);
}

#[test]
fn top3_rate_dominates_top1() {
    for (seed, noise) in [(0, 0.05), (1, 0.3), (2, 1.0), (3, 2.0)] {
        let mut ds = generate_synthetic(&SyntheticSpec {
            n_sequences: 30,
            noise_std: noise,
            seed,
            ..Default::default()
        })
        .unwrap();
        ds.sequences[0].description = None;
        let o = ExplainOptions::default();
        let t1 = scene_explain_rate(&ds.sequences, &ds.concepts, ExplainMode::Top1, &o).unwrap();
        let t3 = scene_explain_rate(&ds.sequences, &ds.concepts, ExplainMode::Top3, &o).unwrap();
        assert!(t3.rate >= t1.rate && t3.frame_rate >= t1.frame_rate);
        assert_eq!((t1.skipped, t1.scored), (1, 29));
    }
}

fn head_rows(t: &cbdrive_core::Tensor, n: usize) -> cbdrive_core::Tensor {
    cbdrive_core::Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec()).unwrap()
}

#[test]
fn report_is_consistent_and_serializes() {
    let ds = generate_synthetic(&SyntheticSpec {
        n_sequences: 2,
        frames: 30,
        ..Default::default()
    })
    .unwrap();
    let config = ModelConfig {
        tasks: Task::Both,
        ..ModelConfig::default().with_concepts(ds.concepts.len())
    };
    let params = random_params(&config, 5, 0.3);
    let seq = &ds.sequences[1];
    let opts = ExplainOptions::default();
    let report = explain_sequence(seq, &ds.concepts, &params, &config, &opts).unwrap();
    assert_eq!(report.attention.len(), 30);
    assert!(report.attention.iter().sum::<f64>() <= 1.0 + 1e-12);
    assert_eq!(report.frame_top_k.len(), 30);
    assert!(report
        .frame_top_k
        .iter()
        .all(|r| r.len() == opts.k_per_frame));
    assert_eq!(report.windows.len(), 2);
    let scores = concept_scores(&seq.frame_embeddings, &ds.concepts).unwrap();
    assert_eq!(
        report.windows,
        aggregate_top_concepts(&scores, ds.concepts.texts(), 20, 10).unwrap()
    );
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 31);
    assert_eq!(
        csv.lines().next().unwrap(),
        "frame,attention,reveal,top1_concept"
    );
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["attention"].as_array().unwrap().len(), 30);
    assert_eq!(json["sequence"], seq.id.as_str());

    let untrained = ModelParams::init(&config, 0).unwrap();
    let short = cbdrive_core::DriveSequence {
        frame_embeddings: head_rows(&seq.frame_embeddings, 5),
        sensors: head_rows(&seq.sensors, 5),
        ..seq.clone()
    };
    let r = explain_sequence(&short, &ds.concepts, &untrained, &config, &opts).unwrap();
    assert!(r.events.is_empty() && r.reveals.iter().all(|f| !f.reveal));
}
