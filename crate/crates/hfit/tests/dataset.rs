use hfit::core::data::synth_scene;
use hfit::core::Tensor;
use hfit::dataset::{load_dataset, read_depth, write_dataset, write_depth, DatasetManifest};
use hfit::Error;

#[test]
fn samples_load_in_split_order() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<(String, _)> = [5u64, 1, 9]
        .iter()
        .map(|&s| (format!("scene_{s}"), synth_scene(s, 32, 32, 4).unwrap()))
        .collect();
    write_dataset(dir.path(), "train", &samples).unwrap();
    let manifest = DatasetManifest::open(dir.path(), "train").unwrap();
    let ids: Vec<&str> = manifest.triples.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(ids, ["scene_5", "scene_1", "scene_9"]);
    let loaded = load_dataset(dir.path(), "train").unwrap();
    for ((_, want), got) in samples.iter().zip(&loaded) {
        assert_eq!(got.labels, want.labels);
        // 8-bit colour and 16-bit depth quantization.
        for (a, b) in got.rgb.data().iter().zip(want.rgb.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        for (a, b) in got.depth3.data().iter().zip(want.depth3.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn size_mismatch_names_the_triple() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scene(0, 32, 32, 4).unwrap();
    write_dataset(dir.path(), "val", &[("bad_one".into(), s)]).unwrap();
    let small = synth_scene(1, 32, 64, 4).unwrap();
    write_depth(&dir.path().join("depth/bad_one.png"), &small.depth3).unwrap();
    let err = load_dataset(dir.path(), "val").unwrap_err();
    assert!(
        matches!(&err, Error::Sample { id, .. } if id == "bad_one"),
        "{err}"
    );
    assert!(err.to_string().contains("bad_one"));
}

#[test]
fn missing_file_names_the_triple() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scene(0, 32, 32, 4).unwrap();
    write_dataset(dir.path(), "val", &[("gone".into(), s)]).unwrap();
    std::fs::remove_file(dir.path().join("labels/gone.png")).unwrap();
    let err = DatasetManifest::open(dir.path(), "val").unwrap_err();
    assert!(err.to_string().contains("gone"), "{err}");
}

#[test]
fn full_scale_depth_reads_as_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.png");
    let mut t = Tensor::zeros(&[2, 2, 3]);
    t.data_mut()[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
    write_depth(&path, &t).unwrap();
    let back = read_depth(&path).unwrap();
    assert_eq!(back.shape(), &[2, 2, 3]);
    assert_eq!(&back.data()[..3], &[1.0, 1.0, 1.0]);
    assert!(back.data()[3..].iter().all(|&v| v == 0.0));
}
