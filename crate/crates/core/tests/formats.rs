mod support;

use cbdrive_core::concepts::{
    concept_scores, decode_embeddings, encode_embeddings, read_concept_texts, read_embeddings,
    write_concept_texts, write_embeddings,
};
use cbdrive_core::data::{
    decode_sequence, encode_sequence, read_sequence, write_sequence, ConceptFiles, Normalizer,
    SequenceEntry, Targets, Units,
};
use cbdrive_core::model::{
    decode_checkpoint, encode_checkpoint, forward_scores, read_checkpoint, write_checkpoint,
    ModelConfig, Task,
};
use cbdrive_core::rng::rng_from_seed;
use cbdrive_core::{DatasetManifest, DriveSequence, ErrorKind, Profile, SourceTag, Tensor};
use proptest::prelude::*;
use support::*;

fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f32..1e3f32, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn sequence() -> impl Strategy<Value = DriveSequence> {
    (2usize..24, 1usize..12, any::<bool>()).prop_flat_map(|(t, l, nuscenes)| {
        let t = if nuscenes { 20 } else { t };
        (
            f32_values(t * l),
            prop::collection::vec((0.0f64..60.0, -540.0f64..540.0, 0.0f64..200.0), t),
            (-540.0f64..540.0, 0.0f64..200.0),
            0.5f32..30.0,
            prop::option::of("\\PC{0,40}"),
        )
            .prop_map(move |(emb, sensors, (angle, distance), fps, description)| {
                DriveSequence {
                    id: "clip".into(),
                    frame_embeddings: Tensor::matrix(t, l, emb).unwrap(),
                    sensors: Tensor::matrix(
                        t,
                        3,
                        sensors
                            .into_iter()
                            .flat_map(|(v, a, d)| [v, a, d])
                            .collect(),
                    )
                    .unwrap(),
                    targets: Targets { angle, distance },
                    fps: if nuscenes { 1.0 } else { fps },
                    profile: if nuscenes {
                        Profile::Nuscenes
                    } else {
                        Profile::None
                    },
                    description,
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sequence_files_round_trip(seq in sequence()) {
        let bytes = encode_sequence(&seq).unwrap();
        prop_assert_eq!(&decode_sequence(&bytes, "clip").unwrap(), &seq);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.cgsq");
        write_sequence(&seq, &path).unwrap();
        prop_assert_eq!(read_sequence(&path).unwrap(), seq);
    }

    #[test]
    fn embedding_files_round_trip((k, l, data) in (1usize..20, 1usize..20).prop_flat_map(|(k, l)| (Just(k), Just(l), f32_values(k * l)))) {
        let m = Tensor::matrix(k, l, data).unwrap();
        prop_assert_eq!(&decode_embeddings(&encode_embeddings(&m).unwrap()).unwrap(), &m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("concepts.cgem");
        write_embeddings(&path, &m).unwrap();
        prop_assert_eq!(read_embeddings(&path).unwrap(), m);
    }

    #[test]
    fn truncated_sequences_are_format_errors(seq in sequence(), cut in 0.0f64..1.0) {
        let bytes = encode_sequence(&seq).unwrap();
        let at = ((bytes.len() - 1) as f64 * cut) as usize;
        let err = decode_sequence(&bytes[..at], "clip").unwrap_err();
        prop_assert_eq!(err.kind(), ErrorKind::Data);
    }
}

#[test]
fn embeddings_narrow_to_f32() {
    let m = Tensor::matrix(1, 2, vec![0.1, 1.0 / 3.0]).unwrap();
    let back = decode_embeddings(&encode_embeddings(&m).unwrap()).unwrap();
    assert_eq!(back.data(), &[0.1f32 as f64, (1.0f32 / 3.0) as f64]);
}

#[test]
fn concept_texts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("concepts.txt");
    let texts = vec![
        "a photo of a car".to_string(),
        "a photo of a wet road, at night".to_string(),
    ];
    write_concept_texts(&path, &texts).unwrap();
    assert_eq!(read_concept_texts(&path).unwrap(), texts);
}

fn config(tasks: Task) -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        n_layers: 2,
        n_heads: 4,
        window: 4,
        ffn_dim: 24,
        max_seq_len: 40,
        tasks,
        ..ModelConfig::default().with_concepts(6)
    }
}

#[test]
fn checkpoint_restores_predictions_bit_exactly() {
    for (seed, tasks) in [(1, Task::Both), (2, Task::Angle), (3, Task::Distance)] {
        let config = config(tasks);
        let mut params = random_params(&config, seed, 0.4);
        params.normalizer = Normalizer {
            sensor_mean: [12.5, -0.3, 31.0],
            sensor_std: [4.1, 2.2, 9.9],
            target_mean: [0.1, 28.0],
            target_std: [3.3, 11.7],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cgck");
        write_checkpoint(&path, &config, &params).unwrap();
        let (c2, p2) = read_checkpoint(&path).unwrap();
        assert_eq!(c2, config);
        assert_eq!(p2, params);
        let bytes = encode_checkpoint(&config, &params).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(encode_checkpoint(&c2, &p2).unwrap(), bytes);

        let mut rng = rng_from_seed(seed);
        for frames in [3, 17, 40] {
            let emb = tensor(&random_matrix(&mut rng, frames, 6, -1.0, 1.0));
            let set = cbdrive_core::ConceptSet::new(
                (0..6).map(|i| format!("c{i}")).collect(),
                Tensor::matrix(
                    6,
                    6,
                    (0..36)
                        .map(|i| if i % 7 == 0 { 1.0 } else { 0.0 })
                        .collect(),
                )
                .unwrap(),
                SourceTag::Human,
            )
            .unwrap();
            let scores = concept_scores(&emb, &set).unwrap();
            let sensors = tensor(&random_matrix(&mut rng, frames, 3, 0.0, 50.0));
            let a = forward_scores(&scores, &sensors, &params, &config, None).unwrap();
            let b = forward_scores(&scores, &sensors, &p2, &c2, None).unwrap();
            for (x, y) in [
                (a.prediction.angle, b.prediction.angle),
                (a.prediction.distance, b.prediction.distance),
            ] {
                assert_eq!(x.map(f64::to_bits), y.map(f64::to_bits));
            }
        }
    }
}

#[test]
fn checkpoint_truncation_is_detected_at_every_length() {
    let config = config(Task::Both);
    let bytes = encode_checkpoint(&config, &random_params(&config, 0, 0.1)).unwrap();
    for cut in (0..bytes.len()).step_by(97) {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Data, "cut at {cut}");
    }
}

#[test]
fn manifest_round_trips_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ds = cbdrive_core::data::generate_synthetic(&cbdrive_core::data::SyntheticSpec {
        n_sequences: 3,
        ..Default::default()
    })
    .unwrap();
    write_concept_texts(&dir.path().join("concepts.txt"), ds.concepts.texts()).unwrap();
    write_embeddings(&dir.path().join("concepts.cgem"), ds.concepts.embeddings()).unwrap();
    let mut entries = Vec::new();
    for s in &ds.sequences {
        let name = format!("{}.cgsq", s.id);
        write_sequence(s, &dir.path().join(&name)).unwrap();
        entries.push(SequenceEntry {
            path: name,
            profile: s.profile,
        });
    }
    let manifest = DatasetManifest {
        concepts: ConceptFiles {
            embeddings: "concepts.cgem".into(),
            source_tag: SourceTag::Generated,
            texts: "concepts.txt".into(),
        },
        dataset: "synthetic".into(),
        embedding_width: ds.concepts.width(),
        sequences: entries,
        units: Units::default(),
    };
    let path = dir.path().join("manifest.json");
    manifest.write(&path).unwrap();
    assert_eq!(DatasetManifest::read(&path).unwrap(), manifest);
    let loaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(loaded.sequences, ds.sequences);
    assert_eq!(loaded.concepts.texts(), ds.concepts.texts());

    let wrong = DatasetManifest {
        embedding_width: manifest.embedding_width + 1,
        ..manifest
    };
    wrong.write(&path).unwrap();
    let err = DatasetManifest::load(&path).unwrap_err();
    assert!(err.to_string().contains("embedding_width"));
}
