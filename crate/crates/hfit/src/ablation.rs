//! Ablation modes and the bypass probes that must pass before a mode is
//! trained.

use std::fmt;
use std::str::FromStr;

use hfit_core::data::{stack, synth_scene};
use hfit_core::model::{Ablation, ForwardOutput};
use hfit_core::vit::BackboneConfig;
use hfit_core::{BatchInput, Graph, Hfit, HfitConfig, Mode, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AblationMode {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "depth")]
    Depth,
    #[default]
    #[serde(rename = "rgbdepth")]
    RgbDepth,
    #[serde(rename = "no-rgb-weight")]
    NoRgbWeight,
    #[serde(rename = "no-depth-weight")]
    NoDepthWeight,
    #[serde(rename = "no-hgfi-vit")]
    NoHgfiVit,
    #[serde(rename = "no-hgfi-adapter")]
    NoHgfiAdapter,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Rgb,
        AblationMode::Depth,
        AblationMode::RgbDepth,
        AblationMode::NoRgbWeight,
        AblationMode::NoDepthWeight,
        AblationMode::NoHgfiVit,
        AblationMode::NoHgfiAdapter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Rgb => "rgb",
            AblationMode::Depth => "depth",
            AblationMode::RgbDepth => "rgbdepth",
            AblationMode::NoRgbWeight => "no-rgb-weight",
            AblationMode::NoDepthWeight => "no-depth-weight",
            AblationMode::NoHgfiVit => "no-hgfi-vit",
            AblationMode::NoHgfiAdapter => "no-hgfi-adapter",
        }
    }

    /// Which study the mode belongs to: prior inputs, fusion weights or
    /// gated integration.
    pub fn group(self) -> &'static str {
        match self {
            AblationMode::Rgb | AblationMode::Depth | AblationMode::RgbDepth => "dspe",
            AblationMode::NoRgbWeight | AblationMode::NoDepthWeight => "rhff",
            AblationMode::NoHgfiVit | AblationMode::NoHgfiAdapter => "hgfi",
        }
    }

    /// Parse a comma-separated list.
    pub fn parse_list(csv: &str) -> Result<Vec<Self>> {
        csv.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

impl From<AblationMode> for Ablation {
    fn from(m: AblationMode) -> Self {
        let mut a = Ablation::default();
        match m {
            AblationMode::Rgb => a.zero_depth_input = true,
            AblationMode::Depth => a.zero_rgb_prior = true,
            AblationMode::RgbDepth => {}
            AblationMode::NoRgbWeight => a.no_vit_confidence = true,
            AblationMode::NoDepthWeight => a.no_prior_confidence = true,
            AblationMode::NoHgfiVit => a.no_vit_integration = true,
            AblationMode::NoHgfiAdapter => a.no_prior_integration = true,
        }
        a
    }
}

/// A small instance of `base` with the given ablation, for probing.
fn probe_model(base: &HfitConfig, ablation: Ablation) -> Result<Hfit> {
    let cfg = HfitConfig {
        backbone: BackboneConfig {
            embed_dim: 12,
            depth: 4,
            heads: 2,
            stages: 2,
            ..base.backbone
        },
        adapter_heads: 2,
        decoder_channels: 8,
        crop_size: 32,
        ablation,
        ..base.clone()
    };
    Ok(Hfit::new(cfg)?)
}

struct Run {
    graph_values: Vec<Tensor>,
    out: ForwardOutput,
}

fn run(model: &Hfit, input: &BatchInput) -> Result<Run> {
    let mut g = Graph::new(&model.params, Mode::Eval);
    let out = model.forward(&mut g, input)?;
    let mut values = Vec::new();
    for s in &out.stages {
        for v in [
            s.prior_in,
            s.vit_in,
            s.recalibrated,
            s.vit_confidence,
            s.prior_confidence,
            s.vit_out,
            s.vit_integrated,
            s.prior_integrated,
        ] {
            values.push(g.value(v).clone());
        }
    }
    values.push(g.value(out.logits).clone());
    Ok(Run {
        graph_values: values,
        out,
    })
}

const PER_STAGE: usize = 8;
const PRIOR_IN: usize = 0;
const VIT_IN: usize = 1;
const RECAL: usize = 2;
const CV: usize = 3;
const CS: usize = 4;
const VIT_OUT: usize = 5;
const VIT_INT: usize = 6;
const PRIOR_INT: usize = 7;

impl Run {
    fn get(&self, stage: usize, what: usize) -> &Tensor {
        &self.graph_values[stage * PER_STAGE + what]
    }

    fn stages(&self) -> usize {
        self.out.stages.len()
    }

    fn logits(&self) -> &Tensor {
        self.graph_values.last().unwrap()
    }
}

/// `tokens[.., t, :] * weights[.., t, 0]`.
fn scale_rows(tokens: &Tensor, weights: &Tensor) -> Tensor {
    let d = tokens.last_dim();
    let mut out = tokens.clone();
    for (row, &w) in out.data_mut().chunks_mut(d).zip(weights.data()) {
        row.iter_mut().for_each(|v| *v *= w);
    }
    out
}

/// Verify that the code path selected by `mode` bypasses exactly what it
/// claims to.
pub fn probe(mode: AblationMode, base: &HfitConfig) -> Result<()> {
    let fail = |m: &str| {
        Err(Error::Probe {
            mode: mode.to_string(),
            message: m.to_string(),
        })
    };
    let model = probe_model(base, mode.into())?;
    let classes = base.num_classes;
    let samples = [
        synth_scene(11, 32, 32, classes)?,
        synth_scene(12, 32, 32, classes)?,
    ];
    let (input, _) = stack(&samples)?;
    let mut other_depth = input.clone();
    other_depth.depth = other_depth.depth.map(|v| 1.0 - v);
    let mut other_rgb = input.clone();
    other_rgb.rgb = other_rgb.rgb.map(|v| 1.0 - v);
    let base_run = run(&model, &input)?;

    match mode {
        AblationMode::Rgb => {
            if run(&model, &other_depth)?.logits() != base_run.logits() {
                return fail("output depends on the depth input");
            }
        }
        AblationMode::Depth => {
            let r = run(&model, &other_rgb)?;
            if r.get(0, PRIOR_IN) != base_run.get(0, PRIOR_IN) {
                return fail("spatial prior depends on the RGB input");
            }
            if r.get(0, VIT_IN) == base_run.get(0, VIT_IN) {
                return fail("backbone no longer sees the RGB input");
            }
        }
        AblationMode::RgbDepth => {
            if run(&model, &other_depth)?.logits() == base_run.logits() {
                return fail("output ignores the depth input");
            }
        }
        AblationMode::NoRgbWeight | AblationMode::NoDepthWeight => {
            for i in 0..base_run.stages() {
                let (p, cv, cs) = (
                    base_run.get(i, PRIOR_IN),
                    base_run.get(i, CV),
                    base_run.get(i, CS),
                );
                let expected = if mode == AblationMode::NoRgbWeight {
                    scale_rows(p, cs)
                } else {
                    scale_rows(p, &cv.map(|c| 1.0 - c))
                };
                if base_run.get(i, RECAL) != &expected {
                    return fail("recalibration does not drop the selected factor");
                }
            }
            let both = Ablation {
                no_vit_confidence: true,
                no_prior_confidence: true,
                ..Ablation::default()
            };
            let r = run(&probe_model(base, both)?, &input)?;
            for i in 0..r.stages() {
                if r.get(i, RECAL) != r.get(i, PRIOR_IN) {
                    return fail("recalibration with both factors removed is not the identity");
                }
            }
        }
        AblationMode::NoHgfiVit => {
            for i in 0..base_run.stages() {
                if base_run.get(i, VIT_INT) != base_run.get(i, VIT_OUT) {
                    return fail("backbone integration is not a pass-through");
                }
            }
        }
        AblationMode::NoHgfiAdapter => {
            for i in 0..base_run.stages() {
                if base_run.get(i, PRIOR_INT) != base_run.get(i, RECAL) {
                    return fail("prior integration is not a pass-through");
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!(matches!(
            "rgb-d".parse::<AblationMode>(),
            Err(Error::UnknownMode(_))
        ));
        assert_eq!(
            AblationMode::parse_list("rgb, depth,rgbdepth")
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn every_probe_passes() {
        let cfg = HfitConfig::default();
        for m in AblationMode::ALL {
            probe(m, &cfg).unwrap_or_else(|e| panic!("{m}: {e}"));
        }
    }

    #[test]
    fn probe_detects_a_wrong_wiring() {
        // The full model must fail the pass-through probe.
        let cfg = HfitConfig::default();
        let model = probe_model(&cfg, Ablation::default()).unwrap();
        let (input, _) = stack(&[
            synth_scene(1, 32, 32, 6).unwrap(),
            synth_scene(2, 32, 32, 6).unwrap(),
        ])
        .unwrap();
        let r = run(&model, &input).unwrap();
        assert_ne!(r.get(1, VIT_INT), r.get(1, VIT_OUT));
    }
}
