use std::fs;
use std::path::Path;

use proptest::prelude::*;
use proto_cil::datahub::{
    load_dataset, make_scenario, retained_count, synth_dataset, write_dataset, DataError,
    ScenarioSpec, Split, SynthKind,
};

fn write_manifest(dir: &Path, rows: &str, classes: &[&str]) -> std::path::PathBuf {
    let csv = dir.join("m.csv");
    fs::write(&csv, format!("path,label,split\n{rows}")).unwrap();
    let header = serde_json::json!({ "name": "tiny", "classes": classes });
    fs::write(dir.join("m.json"), header.to_string()).unwrap();
    csv
}

fn pgm8(path: &Path, w: usize, h: usize, pixels: &[u8]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).unwrap();
}

#[test]
fn ten_classes_one_of_each_split() {
    let dir = tempfile::tempdir().unwrap();
    let classes: Vec<String> = (0..10).map(|k| format!("k{k}")).collect();
    let mut rows = String::new();
    for k in &classes {
        for split in ["train", "test"] {
            let name = format!("{k}_{split}.pgm");
            pgm8(&dir.path().join(&name), 2, 2, &[0, 64, 128, 255]);
            rows.push_str(&format!("{name},{k},{split}\n"));
        }
    }
    let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
    let ds = load_dataset(&write_manifest(dir.path(), &rows, &refs)).unwrap();
    assert_eq!(ds.samples.len(), 20);
    assert_eq!(ds.classes.len(), 10);
    assert_eq!(ds.split(Split::Train).count(), 10);
    let px = ds.samples[0].image.pixels();
    assert_eq!(px[3], 1.0);
    assert_eq!(px[0], 0.0);
    assert_eq!(px[1], 64.0 / 255.0);
}

#[test]
fn missing_image_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_manifest(dir.path(), "nowhere/ghost.pgm,a,train\n", &["a"]);
    let err = load_dataset(&csv).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }));
    assert!(err.to_string().contains("ghost.pgm"), "{err}");
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    pgm8(&dir.path().join("x.pgm"), 1, 1, &[9]);
    let csv = write_manifest(dir.path(), "x.pgm,a,validation\n", &["a"]);
    let err = load_dataset(&csv).unwrap_err().to_string();
    assert!(err.contains("m.csv") && err.contains("line 2"), "{err}");

    fs::write(
        dir.path().join("m.csv"),
        "file,label,split\nx.pgm,a,train\n",
    )
    .unwrap();
    assert!(matches!(
        load_dataset(&csv),
        Err(DataError::Manifest { .. })
    ));

    let csv = write_manifest(dir.path(), "x.pgm,a,train\n", &["a"]);
    let header = serde_json::json!({ "name": "tiny", "classes": ["a"], "height": 2, "width": 2 });
    fs::write(dir.path().join("m.json"), header.to_string()).unwrap();
    match load_dataset(&csv) {
        Err(DataError::DimensionMismatch { path, .. }) => assert!(path.ends_with("x.pgm")),
        other => panic!("expected dimension mismatch, got {other:?}"),
    }
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(SynthKind::LowrankSpeckle, 3, 2, 1, 8, 4).unwrap();
    let back = load_dataset(&write_dataset(&ds, dir.path()).unwrap()).unwrap();
    assert_eq!(back.classes, ds.classes);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!((a.label.as_str(), a.split), (b.label.as_str(), b.split));
        for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
            assert!((x - y).abs() <= 0.5 / 65535.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scenario_partitions_classes(
        schedule in prop::collection::vec(1usize..4, 1..6), portion in 0.05f64..=1.0, seed in 0u64..500
    ) {
        let total: usize = schedule.iter().sum();
        prop_assume!(total >= 2);
        let ds = synth_dataset(SynthKind::Blobs, total, 7, 3, 4, seed).unwrap();
        let spec = ScenarioSpec {
            schedule: schedule.clone(),
            class_order: ds.classes.clone(),
            portion,
            seed,
        };
        let seq = make_scenario(std::slice::from_ref(&ds), &spec).unwrap();
        prop_assert_eq!(seq.len(), schedule.len());
        let mut seen = Vec::new();
        for (t, task) in seq.tasks.iter().enumerate() {
            prop_assert_eq!(task.classes.len(), schedule[t]);
            prop_assert_eq!(task.train.len(), schedule[t] * retained_count(7, portion));
            prop_assert_eq!(task.test.len(), schedule[t] * 3);
            for id in task.train.iter().chain(&task.test) {
                prop_assert!(task.classes.contains(&seq.sample(*id).label));
            }
            seen.extend(task.classes.iter().cloned());
            prop_assert_eq!(seq.eval_set(t).len(), seen.len() * 3);
        }
        prop_assert_eq!(&seen, &ds.classes);
        prop_assert_eq!(make_scenario(std::slice::from_ref(&ds), &spec).unwrap(), seq);
    }
}
