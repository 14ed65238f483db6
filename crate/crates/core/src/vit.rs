//! Plain ViT backbone: patch embedding, learned absolute position table and
//! a stack of pre-norm encoder layers, partitioned into equal stages.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{Builder, Conv2d, LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::pyramid::{check_input_size, resample, VitTokens, VIT_STRIDE};
use crate::resize::ResizeMode;
use crate::tensor::Tensor;

/// Name prefix of every backbone parameter.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub stages: usize,
    pub mlp_ratio: f64,
    pub pos_table_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 192,
            depth: 8,
            heads: 3,
            patch_size: VIT_STRIDE,
            stages: 4,
            mlp_ratio: 4.0,
            pos_table_side: 14,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.patch_size != VIT_STRIDE {
            return bad("patch_size must be 16");
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be a nonzero multiple of heads");
        }
        if self.stages == 0 || self.depth == 0 || !self.depth.is_multiple_of(self.stages) {
            return bad("depth must be a nonzero multiple of stages");
        }
        if self.pos_table_side == 0 {
            return bad("pos_table_side must be positive");
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn layers_per_stage(&self) -> usize {
        self.depth / self.stages
    }

    pub fn mlp_hidden(&self) -> usize {
        libm::round(self.embed_dim as f64 * self.mlp_ratio) as usize
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    heads: usize,
}

impl EncoderLayer {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let mut s = b.sub(name);
        let mut a = s.sub("attn");
        let (q, k, v, proj) = (
            Linear::new(&mut a, "q", d, d, true),
            Linear::new(&mut a, "k", d, d, true),
            Linear::new(&mut a, "v", d, d, true),
            Linear::new(&mut a, "proj", d, d, true),
        );
        Self {
            norm1: LayerNorm::new(&mut s, "norm1", d),
            q,
            k,
            v,
            proj,
            norm2: LayerNorm::new(&mut s, "norm2", d),
            mlp: Mlp::new(&mut s, "mlp", d, cfg.mlp_hidden()),
            heads: cfg.heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let (q, k, v) = (
            self.q.forward(g, h),
            self.k.forward(g, h),
            self.v.forward(g, h),
        );
        let a = g.attention(q, k, v, self.heads);
        let a = self.proj.forward(g, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch: Conv2d,
    pub pos_table: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl Backbone {
    /// Registers parameters under `backbone.`.
    pub fn new(b: &mut Builder<'_>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut s = b.sub("backbone");
        let patch = Conv2d::patchify(&mut s, "patch_embed", 3, d, config.patch_size);
        let side = config.pos_table_side;
        let pos_table = s.random("pos_embed", &[side, side, d]);
        let layers = (0..config.depth)
            .map(|i| EncoderLayer::new(&mut s, &alloc::format!("layers.{i}"), &config))
            .collect();
        Ok(Self {
            config,
            patch,
            pos_table,
            layers,
        })
    }

    /// Mark every backbone parameter as (un)trainable.
    pub fn freeze(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(BACKBONE_PREFIX, frozen);
    }

    /// `[B, H, W, 3]` raster to `[B, H/16·W/16, D]` tokens with the position
    /// table added (bicubically resized when the grid differs from it).
    pub fn patch_embed(&self, g: &mut Graph<'_>, rgb: Var) -> Result<Var> {
        let s = g.shape(rgb).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::InvalidShape(alloc::format!(
                "expected [B,H,W,3], got {s:?}"
            )));
        }
        check_input_size(s[1], s[2])?;
        let (b, gh, gw, d) = (
            s[0],
            s[1] / VIT_STRIDE,
            s[2] / VIT_STRIDE,
            self.config.embed_dim,
        );
        let x = self.patch.forward(g, rgb);
        let side = self.config.pos_table_side;
        let pos = g.param(self.pos_table);
        let pos = g.reshape(pos, &[1, side, side, d]);
        let pos = g.resize(pos, gh, gw, ResizeMode::Bicubic);
        let x = g.add(x, pos);
        Ok(g.reshape(x, &[b, gh * gw, d]))
    }

    /// Apply the `layers_per_stage` encoder layers of stage `stage` (1-based).
    pub fn run_stage(&self, g: &mut Graph<'_>, tokens: Var, stage: usize) -> Result<Var> {
        if stage == 0 || stage > self.config.stages {
            return Err(Error::IndexOutOfRange {
                index: stage,
                max: self.config.stages,
            });
        }
        let per = self.config.layers_per_stage();
        let mut x = tokens;
        for layer in &self.layers[(stage - 1) * per..stage * per] {
            x = layer.forward(g, x);
        }
        Ok(x)
    }

    /// Monolithic forward: patch embedding followed by every layer.
    pub fn forward(&self, g: &mut Graph<'_>, rgb: Var) -> Result<Var> {
        let mut x = self.patch_embed(g, rgb)?;
        for layer in &self.layers {
            x = layer.forward(g, x);
        }
        Ok(x)
    }

    /// Evaluate the patch embedding of a single `H × W × 3` raster.
    pub fn embed_raster(&self, store: &ParamStore, rgb: &Tensor) -> Result<VitTokens> {
        let s = rgb.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape(alloc::format!(
                "expected H×W×3 raster, got {s:?}"
            )));
        }
        let mut g = Graph::new(store, Mode::Eval);
        let x = g.constant(rgb.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let t = self.patch_embed(&mut g, x)?;
        let d = self.config.embed_dim;
        let tokens = g.value(t).clone().reshape(&[s[0] * s[1] / 256, d])?;
        VitTokens::new(tokens, s[0] / VIT_STRIDE, s[1] / VIT_STRIDE)
    }

    /// Copy backbone tensors from `source` into `store`. The position table is
    /// resampled when its side differs; any other shape difference is an
    /// error naming the first offending tensor.
    pub fn load_from(
        &self,
        store: &mut ParamStore,
        source: &[(alloc::string::String, Tensor)],
    ) -> Result<()> {
        let d = self.config.embed_dim;
        let side = self.config.pos_table_side;
        let pos_name = store.entry(self.pos_table).name.clone();
        let mut staged = Vec::new();
        for (id, entry) in store
            .entries()
            .filter(|(_, e)| e.name.starts_with(BACKBONE_PREFIX))
        {
            let Some((_, src)) = source.iter().find(|(n, _)| *n == entry.name) else {
                return Err(Error::MissingParam(entry.name.clone()));
            };
            let value = if entry.name == pos_name && src.shape() != entry.value.shape() {
                let s = src.shape();
                if s.len() != 3 || s[0] != s[1] || s[2] != d {
                    return Err(Error::ParamMismatch {
                        name: entry.name.clone(),
                        expected: entry.value.shape().to_vec(),
                        actual: s.to_vec(),
                    });
                }
                resample(src, side, side, ResizeMode::Bicubic)?
            } else if src.shape() != entry.value.shape() {
                return Err(Error::ParamMismatch {
                    name: entry.name.clone(),
                    expected: entry.value.shape().to_vec(),
                    actual: src.shape().to_vec(),
                });
            } else {
                src.clone()
            };
            staged.push((id, value));
        }
        for (id, v) in staged {
            *store.get_mut(id) = v;
        }
        Ok(())
    }
}
