use std::path::Path;
use std::process::{Command, Output};

use hfit::dataset::read_gray8;
use hfit::run::read_loss_log;

mod common;

fn hfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn invalid_config_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = common::tiny_toml(&out, 1).replace("num_classes = 4", "num_classes = 1");
    let cfg = common::write_config(dir.path(), &text);
    let o = hfit(&["train", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).starts_with("hfit-error[config]: "),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        common::tiny_toml(&dir.path().join("run"), 1).replace("[train]", "[train]\nspeed = 3");
    let cfg = common::write_config(dir.path(), &text);
    let o = hfit(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hfit-error[config]"), "{}", stderr(&o));
}

#[test]
fn empty_split_reports_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(data.join("splits")).unwrap();
    std::fs::write(data.join("splits/train.txt"), "").unwrap();
    let text = common::tiny_toml(&dir.path().join("run"), 1).replace(
        "[data]\n",
        &format!(
            "[data]\nsource = \"dataset\"\nroot = \"{}\"\n",
            data.display()
        ),
    );
    let cfg = common::write_config(dir.path(), &text);
    let o = hfit(&["train", "--config", s(&cfg)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("hfit-error[no-samples]: "), "{err}");
    assert!(err.contains("train"));
}

#[test]
fn train_eval_predict_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = common::write_config(dir.path(), &common::tiny_toml(&out, 1));
    let o = hfit(&["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = read_loss_log(&out.join("loss.csv")).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].0, 1);
    assert!(log[0].1.is_finite() && log[0].1 > 0.0);
    let ckpt = out.join("final.ckpt");
    assert!(ckpt.is_file());

    let o = hfit(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--shards",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kv = std::fs::read_to_string(out.join("metrics.kv")).unwrap();
    for key in ["mFsc=", "mIoU=", "aAcc=", "mPre=", "mRec="] {
        assert!(kv.contains(key), "{key}");
    }

    let data = dir.path().join("data");
    let o = hfit(&[
        "synth",
        "--out",
        s(&data),
        "--split",
        "x",
        "--count",
        "1",
        "--size",
        "32",
        "--classes",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = dir.path().join("pred");
    let o = hfit(&[
        "predict",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--rgb",
        s(&data.join("rgb/x_0000.png")),
        "--depth",
        s(&data.join("depth/x_0000.png")),
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&pred).unwrap().collect();
    assert_eq!(files.len(), 4 + 1);
    let (labels, size) = read_gray8(&pred.join("labels.png")).unwrap();
    assert_eq!(size, (32, 32));
    assert!(labels.iter().all(|&l| l < 4));
    let planes: Vec<Vec<u8>> = (0..4)
        .map(|k| read_gray8(&pred.join(format!("prob_{k}.png"))).unwrap().0)
        .collect();
    for i in 0..32 * 32 {
        let sum: u32 = planes.iter().map(|p| p[i] as u32).sum();
        assert!((253..=257).contains(&sum), "pixel {i}: {sum}");
    }

    let o = hfit(&["inspect", "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    for name in ["backbone", "dspe", "rhff", "hgfi", "decoder", "all"] {
        assert!(table.contains(name), "{name}\n{table}");
    }
}

#[test]
fn wrong_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = common::write_config(dir.path(), &common::tiny_toml(&out, 1));
    assert!(hfit(&["train", "--config", s(&cfg)]).status.success());
    let other = common::tiny_toml(&out, 1).replace("decoder_channels = 8", "decoder_channels = 4");
    let other_cfg = dir.path().join("other.toml");
    std::fs::write(&other_cfg, other).unwrap();
    let o = hfit(&[
        "eval",
        "--config",
        s(&other_cfg),
        "--checkpoint",
        s(&out.join("final.ckpt")),
    ]);
    assert!(
        stderr(&o).starts_with("hfit-error[checkpoint]: "),
        "{}",
        stderr(&o)
    );
}

#[test]
fn golden_suite_passes() {
    let suite = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/golden");
    let o = hfit(&["golden", "--suite", s(&suite)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn unknown_ablation_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), &common::tiny_toml(&dir.path().join("run"), 1));
    let o = hfit(&["ablate", "--config", s(&cfg), "--modes", "rgb,thermal"]);
    assert!(
        stderr(&o).starts_with("hfit-error[ablation]: "),
        "{}",
        stderr(&o)
    );
}
