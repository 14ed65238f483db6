//! TOML run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use hfit_core::data::{AugmentConfig, SynthConfig};
use hfit_core::dspe::{BlockKind, StemConfig};
use hfit_core::model::Ablation;
use hfit_core::optim::AdamWConfig;
use hfit_core::vit::BackboneConfig;
use hfit_core::{HfitConfig, ResizeMode};
use serde::{Deserialize, Serialize};

use crate::ablation::AblationMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StemBlock {
    #[default]
    Plain,
    InvertedBottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub stages: usize,
    pub mlp_ratio: f64,
    pub pos_table_side: usize,
    pub num_classes: usize,
    pub stem_channels: [usize; 3],
    pub stem_block: StemBlock,
    pub shared_stem: bool,
    pub projection_bias: bool,
    pub confidence_kernel: usize,
    pub confidence_dilation: usize,
    pub confidence_eps: f64,
    pub confidence_align: Align,
    pub gate_kernels: [usize; 3],
    pub ffn_ratio: f64,
    pub adapter_heads: usize,
    pub decoder_channels: usize,
    pub crop_size: usize,
    pub ignore_index: u8,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub ablation: AblationMode,
    /// Checkpoint whose backbone tensors replace the random initialization.
    pub backbone_checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = HfitConfig::default();
        Self {
            embed_dim: d.backbone.embed_dim,
            depth: d.backbone.depth,
            heads: d.backbone.heads,
            stages: d.backbone.stages,
            mlp_ratio: d.backbone.mlp_ratio,
            pos_table_side: d.backbone.pos_table_side,
            num_classes: d.num_classes,
            stem_channels: d.stem.channels,
            stem_block: StemBlock::Plain,
            shared_stem: d.stem.shared,
            projection_bias: d.stem.projection_bias,
            confidence_kernel: d.confidence_kernel,
            confidence_dilation: d.confidence_dilation,
            confidence_eps: d.confidence_eps,
            confidence_align: Align::Bilinear,
            gate_kernels: d.gate_kernels,
            ffn_ratio: d.ffn_ratio,
            adapter_heads: d.adapter_heads,
            decoder_channels: d.decoder_channels,
            crop_size: 64,
            ignore_index: d.ignore_index,
            freeze_backbone: true,
            seed: 0,
            ablation: AblationMode::RgbDepth,
            backbone_checkpoint: None,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self) -> HfitConfig {
        HfitConfig {
            backbone: BackboneConfig {
                embed_dim: self.embed_dim,
                depth: self.depth,
                heads: self.heads,
                patch_size: 16,
                stages: self.stages,
                mlp_ratio: self.mlp_ratio,
                pos_table_side: self.pos_table_side,
            },
            stem: StemConfig {
                channels: self.stem_channels,
                block: match self.stem_block {
                    StemBlock::Plain => BlockKind::PlainConv,
                    StemBlock::InvertedBottleneck => BlockKind::InvertedBottleneck,
                },
                shared: self.shared_stem,
                projection_bias: self.projection_bias,
            },
            num_classes: self.num_classes,
            confidence_kernel: self.confidence_kernel,
            confidence_dilation: self.confidence_dilation,
            confidence_eps: self.confidence_eps,
            confidence_align: match self.confidence_align {
                Align::Bilinear => ResizeMode::Bilinear,
                Align::Nearest => ResizeMode::Nearest,
            },
            gate_kernels: self.gate_kernels,
            ffn_ratio: self.ffn_ratio,
            adapter_heads: self.adapter_heads,
            decoder_channels: self.decoder_channels,
            crop_size: self.crop_size,
            ignore_index: self.ignore_index,
            freeze_backbone: self.freeze_backbone,
            seed: self.seed,
            ablation: Ablation::from(self.ablation),
        }
    }

    /// FNV-1a over the canonical JSON of the architecture-relevant fields.
    pub fn fingerprint(&self) -> u64 {
        let mut arch = self.clone();
        // Fields that do not change parameter shapes or semantics of stored tensors.
        arch.seed = 0;
        arch.backbone_checkpoint = None;
        arch.freeze_backbone = true;
        arch.crop_size = 0;
        let json = serde_json::to_string(&arch).expect("model section serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    /// Side of generated scenes.
    pub image_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub synth_regions: [usize; 2],
    pub synth_texture: f64,
    pub synth_depth_noise: f64,
    pub seed: u64,
    pub augment: bool,
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
    pub photometric_prob: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            train_split: "train".into(),
            eval_split: "val".into(),
            image_size: 64,
            train_samples: 16,
            eval_samples: 8,
            synth_regions: [3, 8],
            synth_texture: 0.02,
            synth_depth_noise: 0.0,
            seed: 0,
            augment: true,
            scale_range: [0.5, 2.0],
            flip_prob: 0.5,
            photometric_prob: 0.5,
        }
    }
}

impl DataSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            regions: (self.synth_regions[0], self.synth_regions[1]),
            texture: self.synth_texture,
            depth_noise: self.synth_depth_noise,
        }
    }

    pub fn augment_config(&self, model: &ModelSection) -> AugmentConfig {
        AugmentConfig {
            crop_size: model.crop_size,
            scale_range: (self.scale_range[0], self.scale_range[1]),
            flip_prob: self.flip_prob,
            photometric_prob: self.photometric_prob,
            ignore_index: model.ignore_index,
            ..AugmentConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            iterations: 500,
            batch_size: 4,
            lr: o.lr,
            weight_decay: o.weight_decay,
            warmup_steps: o.warmup_steps,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Full-scale preset: 448² crops and 20,000 iterations.
    pub fn full_scale_preset() -> Self {
        let mut c = Self::default();
        c.model.crop_size = 448;
        c.data.image_size = 512;
        c.train.iterations = 20_000;
        c
    }

    /// Checks everything that can be checked without touching the filesystem
    /// beyond reads.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.to_core().validate()?;
        let (t, d) = (&self.train, &self.data);
        if t.iterations == 0 {
            return bad("train.iterations must be at least 1".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("train.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if t.weight_decay < 0.0 || t.eps <= 0.0 {
            return bad("train.weight_decay must be >= 0 and train.eps > 0".into());
        }
        if d.scale_range[0] <= 0.0 || d.scale_range[0] > d.scale_range[1] {
            return bad("data.scale_range must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&d.flip_prob) || !(0.0..=1.0).contains(&d.photometric_prob) {
            return bad("data probabilities must lie in [0, 1]".into());
        }
        match d.source {
            DataSource::Synthetic => {
                if d.image_size == 0 || d.image_size % 32 != 0 {
                    return bad(format!(
                        "data.image_size {} is not a multiple of 32",
                        d.image_size
                    ));
                }
                if d.train_samples == 0 || d.eval_samples == 0 {
                    return bad("data.train_samples and data.eval_samples must be positive".into());
                }
                if d.synth_regions[0] > d.synth_regions[1] {
                    return bad("data.synth_regions must be ordered".into());
                }
            }
            DataSource::Dataset => {
                let Some(root) = &d.root else {
                    return bad("data.root is required when data.source = \"dataset\"".into());
                };
                if !root.is_dir() {
                    return bad(format!("data.root {} is not a directory", root.display()));
                }
            }
        }
        if !d.augment && d.source == DataSource::Synthetic && d.image_size != self.model.crop_size {
            return bad("without augmentation data.image_size must equal model.crop_size".into());
        }
        if let Some(p) = &self.model.backbone_checkpoint {
            if !p.is_file() {
                return bad(format!(
                    "model.backbone_checkpoint {} does not exist",
                    p.display()
                ));
            }
        }
        if t.output_dir.is_file() {
            return bad(format!(
                "train.output_dir {} is a file",
                t.output_dir.display()
            ));
        }
        Ok(())
    }
}
