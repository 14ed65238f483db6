//! Full assembly: frozen backbone, spatial prior extractor and the N-stage
//! interaction loop, followed by branch aggregation and a light decoder.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::dspe::{Dspe, StemConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::hgfi::{self, HgfiConfig, HgfiStage, StageHistory};
use crate::nn::{Builder, ConvBnAct, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::pyramid::{split_levels_var, PyramidLayout, VIT_LEVEL};
use crate::resize::ResizeMode;
use crate::rhff::{self, Recalibration, RhffConfig, RhffStage};
use crate::tensor::Tensor;
use crate::vit::{Backbone, BackboneConfig, BACKBONE_PREFIX};

/// Label value excluded from loss and metrics by default.
pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// Component switches used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// Feed zeros to the depth stem.
    pub zero_depth_input: bool,
    /// Drop the RGB stem's features from the prior (the backbone still sees RGB).
    pub zero_rgb_prior: bool,
    /// Replace `(1 − C_V)` by 1 during recalibration.
    pub no_vit_confidence: bool,
    /// Replace `C_S` by 1 during recalibration.
    pub no_prior_confidence: bool,
    /// Pass the current backbone-stage feature through instead of gating it.
    pub no_vit_integration: bool,
    /// Pass the current prior through instead of gating it.
    pub no_prior_integration: bool,
}

impl Ablation {
    pub fn recalibration(&self) -> Recalibration {
        Recalibration {
            use_vit_confidence: !self.no_vit_confidence,
            use_prior_confidence: !self.no_prior_confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfitConfig {
    pub backbone: BackboneConfig,
    pub stem: StemConfig,
    pub num_classes: usize,
    pub confidence_kernel: usize,
    pub confidence_dilation: usize,
    pub confidence_eps: f64,
    pub confidence_align: ResizeMode,
    pub gate_kernels: [usize; 3],
    pub ffn_ratio: f64,
    pub adapter_heads: usize,
    pub decoder_channels: usize,
    pub crop_size: usize,
    pub ignore_index: u8,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for HfitConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            stem: StemConfig::default(),
            num_classes: 6,
            confidence_kernel: 3,
            confidence_dilation: 2,
            confidence_eps: 1e-6,
            confidence_align: ResizeMode::Bilinear,
            gate_kernels: [7, 5, 3],
            ffn_ratio: 4.0,
            adapter_heads: 3,
            decoder_channels: 64,
            crop_size: 448,
            ignore_index: DEFAULT_IGNORE_INDEX,
            freeze_backbone: true,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl HfitConfig {
    pub fn rhff(&self) -> RhffConfig {
        RhffConfig {
            num_classes: self.num_classes,
            kernel: self.confidence_kernel,
            dilation: self.confidence_dilation,
            eps: self.confidence_eps,
            heads: self.adapter_heads,
            align_mode: self.confidence_align,
        }
    }

    pub fn hgfi(&self) -> HgfiConfig {
        HgfiConfig {
            gate_kernels: self.gate_kernels,
            ffn_ratio: self.ffn_ratio,
            heads: self.adapter_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.backbone.validate()?;
        self.stem.validate()?;
        self.rhff().validate()?;
        self.hgfi().validate()?;
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".to_string());
        }
        if self.num_classes > 255 || (self.ignore_index as usize) < self.num_classes {
            return bad(alloc::format!(
                "ignore_index {} collides with {} classes",
                self.ignore_index,
                self.num_classes
            ));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(32) {
            return bad(alloc::format!(
                "crop_size {} is not a multiple of 32",
                self.crop_size
            ));
        }
        if self.adapter_heads == 0 || !self.backbone.embed_dim.is_multiple_of(self.adapter_heads) {
            return bad("embed_dim must be a multiple of adapter_heads".to_string());
        }
        if self.decoder_channels == 0 {
            return bad("decoder_channels must be positive".to_string());
        }
        Ok(())
    }
}

/// Batched network input: `[B, H, W, 3]` RGB and replicated depth.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub rgb: Tensor,
    pub depth: Tensor,
}

impl BatchInput {
    pub fn new(rgb: Tensor, depth: Tensor) -> Result<Self> {
        let s = rgb.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::InvalidShape(alloc::format!(
                "expected [B,H,W,3] rgb, got {s:?}"
            )));
        }
        if depth.shape() != s {
            return Err(Error::ShapeMismatch {
                expected: s.to_vec(),
                actual: depth.shape().to_vec(),
            });
        }
        crate::pyramid::check_input_size(s[1], s[2])?;
        Ok(Self { rgb, depth })
    }

    pub fn batch(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.rgb.shape()[1], self.rgb.shape()[2])
    }
}

/// Intermediate values of one interaction stage.
#[derive(Debug, Clone, Copy)]
pub struct StageTrace {
    pub vit_in: Var,
    pub prior_in: Var,
    pub vit_confidence: Var,
    pub prior_confidence: Var,
    pub recalibrated: Var,
    pub injected: Var,
    pub inject_attention: Var,
    pub vit_out: Var,
    pub vit_gate: Var,
    pub vit_integrated: Var,
    pub prior_gate: Var,
    pub prior_integrated: Var,
    pub extract_attention: Var,
    pub prior_out: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, H, W, C]` class scores.
    pub logits: Var,
    /// Backbone tokens entering aggregation, `[B, T_vit, D]`.
    pub vit_final: Var,
    /// Final spatial prior, `[B, T_total, D]`.
    pub prior_final: Var,
    pub layout: PyramidLayout,
    pub stages: Vec<StageTrace>,
}

/// Lateral 1×1 projections, sum at 1/8, two conv blocks and a 1×1 classifier,
/// upsampled ×8.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub lateral: [Linear; 3],
    pub blocks: [ConvBnAct; 2],
    pub classifier: Linear,
}

impl Decoder {
    pub fn new(b: &mut Builder<'_>, dim: usize, width: usize, classes: usize) -> Self {
        let mut s = b.sub("decoder");
        let lateral = [0, 1, 2]
            .map(|i| Linear::new(&mut s, &alloc::format!("lateral.{i}"), dim, width, true));
        let blocks =
            [0, 1].map(|i| ConvBnAct::new(&mut s, &alloc::format!("fuse.{i}"), width, width, 3, 1));
        Self {
            lateral,
            blocks,
            classifier: Linear::new(&mut s, "classifier", width, classes, true),
        }
    }

    /// Three `[B, h, w, D]` grids (strides 8/16/32) to `[B, 8h, 8w, C]` logits.
    pub fn forward(&self, g: &mut Graph<'_>, grids: [Var; 3]) -> Var {
        let s8 = g.shape(grids[0]).to_vec();
        let (h, w) = (s8[1], s8[2]);
        let mut fused: Option<Var> = None;
        for (lat, &grid) in self.lateral.iter().zip(&grids) {
            let x = lat.forward(g, grid);
            let x = g.resize(x, h, w, ResizeMode::Bilinear);
            fused = Some(match fused {
                None => x,
                Some(f) => g.add(f, x),
            });
        }
        let mut x = fused.unwrap();
        for blk in &self.blocks {
            x = blk.forward(g, x);
        }
        let logits = self.classifier.forward(g, x);
        g.resize(logits, h * 8, w * 8, ResizeMode::Bilinear)
    }
}

#[derive(Debug, Clone)]
pub struct Hfit {
    pub config: HfitConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub dspe: Dspe,
    pub rhff: Vec<RhffStage>,
    pub hgfi: Vec<HgfiStage>,
    pub decoder: Decoder,
}

/// Parameter-name prefixes of each model component.
pub const COMPONENTS: [(&str, &str); 5] = [
    ("backbone", BACKBONE_PREFIX),
    ("dspe", "dspe."),
    ("rhff", "rhff."),
    ("hgfi", "hgfi."),
    ("decoder", "decoder."),
];

impl Hfit {
    pub fn new(config: HfitConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed, 0.02);
        let d = config.backbone.embed_dim;
        let mut b = Builder::new(&mut params, &mut init);
        let backbone = Backbone::new(&mut b, config.backbone)?;
        let dspe = Dspe::new(&mut b, config.stem, d)?;
        let (rc, hc) = (config.rhff(), config.hgfi());
        let rhff = (0..config.backbone.stages)
            .map(|i| RhffStage::new(&mut b, &alloc::format!("rhff.{i}"), d, &rc))
            .collect();
        let hgfi = (0..config.backbone.stages)
            .map(|i| HgfiStage::new(&mut b, &alloc::format!("hgfi.{i}"), d, &hc))
            .collect();
        let decoder = Decoder::new(&mut b, d, config.decoder_channels, config.num_classes);
        let mut model = Self {
            config,
            params,
            backbone,
            dspe,
            rhff,
            hgfi,
            decoder,
        };
        model.set_backbone_frozen(model.config.freeze_backbone);
        Ok(model)
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.config.freeze_backbone = frozen;
        self.backbone.freeze(&mut self.params, frozen);
    }

    pub fn graph(&self, mode: Mode) -> Graph<'_> {
        Graph::new(&self.params, mode)
    }

    /// Run the interaction loop and decoder.
    pub fn forward(&self, g: &mut Graph<'_>, input: &BatchInput) -> Result<ForwardOutput> {
        let (h, w) = input.size();
        let layout = PyramidLayout::for_input(h, w)?;
        let ab = self.config.ablation;
        let rgb = g.constant(input.rgb.clone());
        let depth = if ab.zero_depth_input {
            g.constant(Tensor::zeros(input.depth.shape()))
        } else {
            g.constant(input.depth.clone())
        };

        let mut prior = self.dspe.build_prior(g, rgb, depth, ab.zero_rgb_prior)?;
        let mut vit = self.backbone.patch_embed(g, rgb)?;
        let mut history = StageHistory::default();
        let mut stages = Vec::with_capacity(self.rhff.len());

        for (i, (rs, hs)) in self.rhff.iter().zip(&self.hgfi).enumerate() {
            let (vit_in, prior_in) = (vit, prior);
            let r = rhff::stage_forward(rs, g, vit, prior, &layout, ab.recalibration());
            let vit_out = self.backbone.run_stage(g, r.injected, i + 1)?;

            let vit_gate = hs.vit_gate(g, vit_out);
            let vit_integrated = if ab.no_vit_integration {
                vit_out
            } else {
                hgfi::integrate(g, vit_out, vit_gate, &history.vit)
            };
            history.vit.push((vit_out, vit_gate));

            let prior_gate = hs.prior_gate(g, r.recalibrated, &layout);
            let prior_integrated = if ab.no_prior_integration {
                r.recalibrated
            } else {
                hgfi::integrate(g, r.recalibrated, prior_gate, &history.prior)
            };
            history.prior.push((prior_integrated, prior_gate));

            let (prior_out, ext) = hs.extract(g, prior_integrated, vit_integrated);
            stages.push(StageTrace {
                vit_in,
                prior_in,
                vit_confidence: r.vit_confidence,
                prior_confidence: r.prior_confidence,
                recalibrated: r.recalibrated,
                injected: r.injected,
                inject_attention: r.attention,
                vit_out,
                vit_gate,
                vit_integrated,
                prior_gate,
                prior_integrated,
                extract_attention: ext.attention,
                prior_out,
            });
            prior = prior_out;
            // The backbone stream continues from its own stage output; gated
            // integration only feeds the adapter branch.
            vit = vit_out;
        }

        let grids = self.aggregate(g, prior, vit, &layout);
        let logits = self.decoder.forward(g, grids);
        Ok(ForwardOutput {
            logits,
            vit_final: vit,
            prior_final: prior,
            layout,
            stages,
        })
    }

    /// Prior levels as grids, with the backbone grid added into the 1/16 level.
    pub fn aggregate(
        &self,
        g: &mut Graph<'_>,
        prior: Var,
        vit: Var,
        layout: &PyramidLayout,
    ) -> [Var; 3] {
        let mut grids = split_levels_var(g, prior, layout);
        let l = layout.levels[VIT_LEVEL];
        let s = g.shape(vit).to_vec();
        let vgrid = g.reshape(vit, &[s[0], l.grid_h, l.grid_w, s[2]]);
        grids[VIT_LEVEL] = g.add(grids[VIT_LEVEL], vgrid);
        grids
    }

    /// Targets for [`Graph::cross_entropy`], validating class ids.
    pub fn targets(&self, labels: &[u8]) -> Result<Vec<Option<usize>>> {
        let c = self.config.num_classes;
        let ignore = self.config.ignore_index;
        labels
            .iter()
            .map(|&l| {
                if l == ignore {
                    Ok(None)
                } else if (l as usize) < c {
                    Ok(Some(l as usize))
                } else {
                    Err(Error::ClassOutOfRange {
                        class: l as usize,
                        num_classes: c,
                    })
                }
            })
            .collect()
    }

    /// Mean pixel cross-entropy over non-ignored labels (0 when every pixel is
    /// ignored).
    pub fn loss(&self, g: &mut Graph<'_>, logits: Var, labels: &[u8]) -> Result<Var> {
        let n = g.value(logits).numel() / self.config.num_classes;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                expected: alloc::vec![n],
                actual: alloc::vec![labels.len()],
            });
        }
        let targets = self.targets(labels)?;
        if targets.iter().all(Option::is_none) {
            log::warn!("every pixel of the batch is ignored; loss defined as 0");
        }
        Ok(g.cross_entropy(logits, targets))
    }

    /// `(name, id)` of every parameter an optimizer may update.
    pub fn trainable_parameters(&self) -> Vec<(String, ParamId)> {
        self.params
            .entries()
            .filter(|(_, e)| e.is_trainable())
            .map(|(id, e)| (e.name.clone(), id))
            .collect()
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, v) in updates {
            *self.params.get_mut(id) = v;
        }
    }

    /// Softmax class probabilities `[B, H, W, C]` in evaluation mode.
    pub fn predict_proba(&self, input: &BatchInput) -> Result<Tensor> {
        let mut g = self.graph(Mode::Eval);
        let out = self.forward(&mut g, input)?;
        let mut p = g.value(out.logits).clone();
        let c = self.config.num_classes;
        for row in p.data_mut().chunks_mut(c) {
            crate::math::softmax_in_place(row, 1.0);
        }
        Ok(p)
    }

    /// Per-pixel argmax class ids in evaluation mode.
    pub fn predict(&self, input: &BatchInput) -> Result<Vec<u8>> {
        let mut g = self.graph(Mode::Eval);
        let out = self.forward(&mut g, input)?;
        Ok(argmax_rows(g.value(out.logits)))
    }
}

/// Argmax over the last axis (first maximum wins).
pub fn argmax_rows(t: &Tensor) -> Vec<u8> {
    let c = t.last_dim();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}
