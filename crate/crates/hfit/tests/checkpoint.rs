use hfit::checkpoint::Checkpoint;
use hfit::config::RunConfig;
use hfit::core::data::{stack, synth_scene};
use hfit::run::build_model;

mod common;

fn config() -> RunConfig {
    RunConfig::from_toml(&common::tiny_toml(std::path::Path::new("unused"), 1)).unwrap()
}

#[test]
fn round_trip_restores_every_tensor() {
    let cfg = config();
    let model = build_model(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&model, &cfg.model, 7)
        .save(&path)
        .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 7);
    ck.check_compatible(&cfg.model, &path).unwrap();
    let back = ck.into_model().unwrap();
    for ((_, a), (_, b)) in model.params.entries().zip(back.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
        assert_eq!(a.frozen, b.frozen);
    }
    let (input, _) = stack(&[synth_scene(3, 32, 32, 4).unwrap()]).unwrap();
    assert_eq!(
        model.predict_proba(&input).unwrap(),
        back.predict_proba(&input).unwrap()
    );
}

#[test]
fn architecture_change_is_rejected() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&build_model(&cfg).unwrap(), &cfg.model, 0)
        .save(&path)
        .unwrap();
    let mut other = cfg.model.clone();
    other.decoder_channels = 16;
    let ck = Checkpoint::load(&path).unwrap();
    assert!(ck.check_compatible(&other, &path).is_err());
    // Seeds and paths do not change the architecture.
    let mut reseeded = cfg.model.clone();
    reseeded.seed = 99;
    ck.check_compatible(&reseeded, &path).unwrap();
}

#[test]
fn truncated_file_is_an_error() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&build_model(&cfg).unwrap(), &cfg.model, 0)
        .save(&path)
        .unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
