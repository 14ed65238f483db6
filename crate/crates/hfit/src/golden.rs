//! Replay of plain-text golden fixtures.
//!
//! A suite is a directory of cases; each case directory holds `case.toml`
//! and tensor files whose first line is `shape: d1 d2 ...` followed by
//! whitespace-separated row-major values.

use std::path::{Path, PathBuf};

use hfit_core::hgfi::integrate_tensors;
use hfit_core::metrics::ConfusionMatrix;
use hfit_core::pyramid::resample;
use hfit_core::rhff::{recalibrate_tensors, Recalibration};
use hfit_core::{Graph, Mode, ParamStore, ResizeMode, Tensor};
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub op: String,
    pub derivation: String,
    pub tolerance: f64,
    #[serde(default)]
    pub out_h: Option<usize>,
    #[serde(default)]
    pub out_w: Option<usize>,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub op: String,
    pub max_diff: f64,
    pub passed: bool,
    /// `(element, got, expected)` for every element outside tolerance.
    pub mismatches: Vec<(usize, f64, f64)>,
}

pub fn parse_tensor(text: &str) -> std::result::Result<Tensor, String> {
    let mut lines = text.lines();
    let head = lines.next().ok_or("empty file")?;
    let dims = head
        .strip_prefix("shape:")
        .ok_or("first line must start with `shape:`")?;
    let shape = dims
        .split_whitespace()
        .map(|d| {
            d.parse::<usize>()
                .map_err(|e| format!("bad dimension `{d}`: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let values = lines
        .flat_map(str::split_whitespace)
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| format!("bad value `{v}`: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Tensor::from_vec(&shape, values).map_err(|e| e.to_string())
}

pub fn format_tensor(t: &Tensor) -> String {
    let mut s = String::from("shape:");
    for d in t.shape() {
        s.push_str(&format!(" {d}"));
    }
    s.push('\n');
    let row = t.shape().last().copied().unwrap_or(1).max(1);
    for chunk in t.data().chunks(row) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

struct CaseDir {
    dir: PathBuf,
}

impl CaseDir {
    fn tensor(&self, name: &str) -> Result<Tensor> {
        let path = self.dir.join(format!("{name}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Fixture {
            path: path.clone(),
            message: e.to_string(),
        })?;
        parse_tensor(&text).map_err(|message| Error::Fixture { path, message })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Fixture {
            path: self.dir.clone(),
            message: message.into(),
        }
    }
}

fn labels(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| v as u8).collect()
}

fn evaluate(case: &CaseDir, spec: &CaseSpec) -> Result<Tensor> {
    match spec.op.as_str() {
        "recalibrate" => Ok(recalibrate_tensors(
            &case.tensor("prior")?,
            &case.tensor("vit_conf")?,
            &case.tensor("prior_conf")?,
            Recalibration::default(),
        )?),
        "integrate" => {
            let feats = case.tensor("history_features")?;
            let gates = case.tensor("history_gates")?;
            let current = case.tensor("current")?;
            let n = feats.shape().first().copied().unwrap_or(0);
            let history = (0..n)
                .map(|l| {
                    let f = feats.narrow(0, l, 1)?.reshape(current.shape())?;
                    let g = gates.narrow(0, l, 1)?.reshape(current.shape())?;
                    Ok((f, g))
                })
                .collect::<hfit_core::Result<Vec<_>>>()?;
            Ok(integrate_tensors(
                &current,
                &case.tensor("gate")?,
                &history,
            )?)
        }
        "cross_entropy" => {
            let logits = case.tensor("logits")?;
            let targets = case
                .tensor("targets")?
                .data()
                .iter()
                .map(|&t| (t >= 0.0 && t < logits.last_dim() as f64).then_some(t as usize))
                .collect();
            let empty = ParamStore::new();
            let mut g = Graph::new(&empty, Mode::Eval);
            let l = g.constant(logits);
            let loss = g.cross_entropy(l, targets);
            Ok(g.value(loss).clone())
        }
        "resize" => {
            let (h, w) = spec
                .out_h
                .zip(spec.out_w)
                .ok_or_else(|| case.fail("resize needs out_h and out_w"))?;
            let mode = match spec.mode.as_deref().unwrap_or("bilinear") {
                "bilinear" => ResizeMode::Bilinear,
                "nearest" => ResizeMode::Nearest,
                "bicubic" => ResizeMode::Bicubic,
                m => return Err(case.fail(format!("unknown resize mode `{m}`"))),
            };
            Ok(resample(&case.tensor("input")?, h, w, mode)?)
        }
        "metrics" => {
            let c = spec
                .num_classes
                .ok_or_else(|| case.fail("metrics needs num_classes"))?;
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(
                &labels(&case.tensor("pred")?),
                &labels(&case.tensor("label")?),
                255,
            )?;
            let r = cm.compute()?;
            Ok(Tensor::from_vec(
                &[5],
                vec![r.m_fsc, r.m_iou, r.a_acc, r.m_pre, r.m_rec],
            )?)
        }
        other => Err(case.fail(format!("unknown op `{other}`"))),
    }
}

pub fn replay_case(dir: &Path) -> Result<CaseResult> {
    let spec_path = dir.join("case.toml");
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: CaseSpec = toml::from_str(&text).map_err(|e| Error::Fixture {
        path: spec_path.clone(),
        message: e.message().to_string(),
    })?;
    let case = CaseDir {
        dir: dir.to_path_buf(),
    };
    let got = evaluate(&case, &spec)?;
    let expected = case.tensor("expected")?;
    if got.numel() != expected.numel() {
        return Err(case.fail(format!(
            "output has shape {:?}, expected {:?}",
            got.shape(),
            expected.shape()
        )));
    }
    let mut max_diff: f64 = 0.0;
    let mut mismatches = Vec::new();
    for (i, (&a, &b)) in got.data().iter().zip(expected.data()).enumerate() {
        let d = (a - b).abs();
        max_diff = max_diff.max(d);
        if !(d <= spec.tolerance) {
            mismatches.push((i, a, b));
        }
    }
    Ok(CaseResult {
        name: dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned(),
        op: spec.op,
        max_diff,
        passed: mismatches.is_empty(),
        mismatches,
    })
}

/// Replay every case directory under `suite`, in name order.
pub fn replay_suite(suite: &Path) -> Result<Vec<CaseResult>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(suite)
        .map_err(|e| Error::io(suite, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("case.toml").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| replay_case(d)).collect()
}
