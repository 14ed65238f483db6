//! Library entry points behind the command-line subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hfit_core::data::{augment, stack, synth_scene_with, RgbdSample};
use hfit_core::metrics::{ConfusionMatrix, MetricsReport};
use hfit_core::model::argmax_rows;
use hfit_core::optim::{train_step, AdamW};
use hfit_core::{BatchInput, Hfit, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{probe, AblationMode};
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::dataset::{load_dataset, read_depth, read_rgb, write_gray8};
use crate::error::{Error, Result};
use crate::report;

/// Offset separating evaluation scene seeds from training scene seeds.
const EVAL_SEED_OFFSET: u64 = 1 << 32;

fn scene_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index)
}

/// Training samples in a fixed order.
pub fn training_samples(cfg: &RunConfig) -> Result<Vec<RgbdSample>> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => (0..d.train_samples as u64)
            .map(|i| {
                let seed = scene_seed(d.seed, i);
                Ok(synth_scene_with(
                    seed,
                    d.image_size,
                    d.image_size,
                    cfg.model.num_classes,
                    &d.synth(),
                )?)
            })
            .collect(),
        DataSource::Dataset => {
            let root = d.root.as_deref().expect("validated");
            let s = load_dataset(root, &d.train_split)?;
            if s.is_empty() {
                return Err(Error::NoSamples(d.train_split.clone()));
            }
            Ok(s)
        }
    }
}

/// Evaluation samples in a fixed order.
pub fn evaluation_samples(cfg: &RunConfig) -> Result<Vec<RgbdSample>> {
    let d = &cfg.data;
    let samples = match d.source {
        DataSource::Synthetic => (0..d.eval_samples as u64)
            .map(|i| {
                let seed = scene_seed(d.seed, EVAL_SEED_OFFSET + i);
                Ok(synth_scene_with(
                    seed,
                    d.image_size,
                    d.image_size,
                    cfg.model.num_classes,
                    &d.synth(),
                )?)
            })
            .collect::<Result<Vec<_>>>()?,
        DataSource::Dataset => load_dataset(d.root.as_deref().expect("validated"), &d.eval_split)?,
    };
    if samples.is_empty() {
        return Err(Error::NoSamples(d.eval_split.clone()));
    }
    Ok(samples)
}

/// Model from the run config, with the backbone optionally loaded from a
/// checkpoint.
pub fn build_model(cfg: &RunConfig) -> Result<Hfit> {
    let mut model = Hfit::new(cfg.model.to_core())?;
    if let Some(path) = &cfg.model.backbone_checkpoint {
        let ck = Checkpoint::load(path)?;
        let pairs = ck.pairs();
        let backbone = model.backbone.clone();
        backbone.load_from(&mut model.params, &pairs)?;
    }
    Ok(model)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Hfit,
    pub losses: Vec<(usize, f64)>,
    pub final_checkpoint: PathBuf,
}

pub fn loss_log_path(cfg: &RunConfig) -> PathBuf {
    cfg.train.output_dir.join("loss.csv")
}

pub fn final_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.train.output_dir.join("final.ckpt")
}

/// sample → augment → forward → loss → step, for `train.iterations` steps.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = training_samples(cfg)?;
    let mut model = build_model(cfg)?;
    let aug = cfg.data.augment_config(&cfg.model);
    if !cfg.data.augment {
        if let Some(s) = pool
            .iter()
            .find(|s| s.height() != cfg.model.crop_size || s.width() != cfg.model.crop_size)
        {
            return Err(Error::Config(format!(
                "sample of size {}×{} needs augmentation to reach crop size {}",
                s.height(),
                s.width(),
                cfg.model.crop_size
            )));
        }
    }

    let out = &cfg.train.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out, e))?;
    let log_path = loss_log_path(cfg);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "iteration,loss").map_err(|e| Error::io(&log_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed ^ 0x5eed_da7a);
    let mut opt = AdamW::new(cfg.train.optimizer());
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.train.iterations);
    for it in 1..=cfg.train.iterations {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        for _ in 0..cfg.train.batch_size {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = &pool[order.pop().unwrap()];
            batch.push(if cfg.data.augment {
                augment(s, &mut rng, &aug)?
            } else {
                s.clone()
            });
        }
        let (input, labels) = stack(&batch)?;
        let loss = train_step(&mut model, &mut opt, &input, &labels)?;
        writeln!(log, "{it},{loss:?}").map_err(|e| Error::io(&log_path, e))?;
        losses.push((it, loss));
        if it % 50 == 0 || it == cfg.train.iterations {
            log::info!("iteration {it}/{} loss {loss:.5}", cfg.train.iterations);
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && it % every == 0 && it != cfg.train.iterations {
            Checkpoint::capture(&model, &cfg.model, it)
                .save(&out.join(format!("iter_{it:06}.ckpt")))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = final_checkpoint_path(cfg);
    Checkpoint::capture(&model, &cfg.model, cfg.train.iterations).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        model,
        losses,
        final_checkpoint,
    })
}

/// Read a `iteration,loss` CSV.
pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (i, v) = l.split_once(',').ok_or_else(|| Error::Decode {
                path: path.to_path_buf(),
                message: format!("bad line `{l}`"),
            })?;
            match (i.parse(), v.parse()) {
                (Ok(i), Ok(v)) => Ok((i, v)),
                _ => Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: format!("bad line `{l}`"),
                }),
            }
        })
        .collect()
}

/// Load a checkpoint that must match the config's architecture.
pub fn load_compatible(cfg: &RunConfig, path: &Path) -> Result<Hfit> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(&cfg.model, path)?;
    let mut model = Hfit::new(cfg.model.to_core())?;
    ck.restore(&mut model)?;
    Ok(model)
}

fn single_input(s: &RgbdSample) -> Result<BatchInput> {
    Ok(stack(std::slice::from_ref(s))?.0)
}

/// Confusion matrix of `model` over `samples`, one sample per forward.
pub fn confusion(model: &Hfit, samples: &[RgbdSample]) -> Result<ConfusionMatrix> {
    let c = &model.config;
    let mut cm = ConfusionMatrix::new(c.num_classes);
    for s in samples {
        let pred = model.predict(&single_input(s)?)?;
        cm.accumulate(&pred, &s.labels, c.ignore_index)?;
    }
    Ok(cm)
}

/// Accumulate `k` contiguous shards independently and sum them.
pub fn sharded_confusion(
    model: &Hfit,
    samples: &[RgbdSample],
    shards: usize,
) -> Result<ConfusionMatrix> {
    let mut total = ConfusionMatrix::new(model.config.num_classes);
    let per = samples.len().div_ceil(shards.max(1)).max(1);
    for chunk in samples.chunks(per) {
        total.merge(&confusion(model, chunk)?)?;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub text_path: PathBuf,
    pub kv_path: PathBuf,
}

/// Evaluate a checkpoint on the configured evaluation split and write
/// `<out>/metrics.txt` and `<out>/metrics.kv`.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    shards: usize,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let model = load_compatible(cfg, checkpoint)?;
    let samples = evaluation_samples(cfg)?;
    let report = sharded_confusion(&model, &samples, shards)?.compute()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text_path = out.join("metrics.txt");
    let kv_path = out.join("metrics.kv");
    std::fs::write(&text_path, report::metrics_table(&report))
        .map_err(|e| Error::io(&text_path, e))?;
    std::fs::write(&kv_path, report::metrics_kv(&report)).map_err(|e| Error::io(&kv_path, e))?;
    Ok(EvalOutcome {
        report,
        text_path,
        kv_path,
    })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub labels: Vec<u8>,
    /// `[H, W, C]` softmax probabilities.
    pub probabilities: Tensor,
    pub files: Vec<PathBuf>,
}

fn pad_to_32(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    let mut out = Tensor::zeros(&[ph, pw, c]);
    for y in 0..h {
        out.data_mut()[y * pw * c..(y * pw + w) * c]
            .copy_from_slice(&t.data()[y * w * c..(y + 1) * w * c]);
    }
    out
}

/// Label map `labels.png` plus one 8-bit probability raster per class.
pub fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    rgb: &Path,
    depth: &Path,
    out: &Path,
    pad: bool,
) -> Result<Prediction> {
    cfg.validate()?;
    let model = load_compatible(cfg, checkpoint)?;
    let (rgb_t, depth_t) = (read_rgb(rgb)?, read_depth(depth)?);
    if rgb_t.shape() != depth_t.shape() {
        return Err(Error::Sample {
            id: rgb.display().to_string(),
            message: format!("rgb is {:?}, depth is {:?}", rgb_t.shape(), depth_t.shape()),
        });
    }
    let (h, w) = (rgb_t.shape()[0], rgb_t.shape()[1]);
    let (rgb_p, depth_p) = if pad {
        (pad_to_32(&rgb_t), pad_to_32(&depth_t))
    } else {
        (rgb_t, depth_t)
    };
    let (ph, pw) = (rgb_p.shape()[0], rgb_p.shape()[1]);
    let input = BatchInput::new(
        rgb_p.reshape(&[1, ph, pw, 3])?,
        depth_p.reshape(&[1, ph, pw, 3])?,
    )?;
    let probs = model.predict_proba(&input)?;
    let c = model.config.num_classes;
    let probs = probs
        .reshape(&[ph, pw, c])?
        .narrow(0, 0, h)?
        .narrow(1, 0, w)?;
    let labels = argmax_rows(&probs);

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![out.join("labels.png")];
    write_gray8(&files[0], &labels, h, w)?;
    for k in 0..c {
        let plane: Vec<u8> = probs
            .data()
            .chunks(c)
            .map(|p| (p[k].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = out.join(format!("prob_{k}.png"));
        write_gray8(&path, &plane, h, w)?;
        files.push(path);
    }
    Ok(Prediction {
        labels,
        probabilities: probs,
        files,
    })
}

/// Probe, train and evaluate each mode; writes `<output_dir>/ablation.txt`.
pub fn ablate(
    cfg: &RunConfig,
    modes: &[AblationMode],
) -> Result<Vec<(AblationMode, MetricsReport)>> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::Config("no ablation modes given".into()));
    }
    let core = cfg.model.to_core();
    for &m in modes {
        probe(m, &core)?;
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &m in modes {
        let mut run = cfg.clone();
        run.model.ablation = m;
        run.train.output_dir = cfg.train.output_dir.join("ablation").join(m.as_str());
        log::info!("ablation mode {m}");
        let t = train(&run)?;
        let e = evaluate(&run, &t.final_checkpoint, &run.train.output_dir, 1)?;
        rows.push((m, e.report));
    }
    let table = report::ablation_table(&rows);
    let path = cfg.train.output_dir.join("ablation.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Parameter report of a checkpoint.
pub fn inspect(checkpoint: &Path) -> Result<String> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    Ok(report::parameter_table(&model))
}
