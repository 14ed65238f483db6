//! Duplex spatial prior extractor: twin convolutional stems over RGB and
//! replicated depth, summed per scale and projected to the token width.

use alloc::string::ToString;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Builder, Conv2d, ConvBnAct, DepthwiseConv2d, Linear};
use crate::pyramid::{check_input_size, flatten_concat_var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockKind {
    /// Stride-2 3×3 conv → BN → ReLU.
    #[default]
    PlainConv,
    /// Fused expand conv (stride 2) → 1×1 project, then a depth-wise inverted
    /// residual at the output resolution.
    InvertedBottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemConfig {
    /// Channels at strides 8, 16 and 32.
    pub channels: [usize; 3],
    pub block: BlockKind,
    /// Use one stem for both modalities.
    pub shared: bool,
    pub projection_bias: bool,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            channels: [24, 48, 96],
            block: BlockKind::PlainConv,
            shared: false,
            projection_bias: true,
        }
    }
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c < 2) {
            return Err(Error::InvalidConfig(
                "stem channels must be at least 2".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Rgb,
    Depth,
}

#[derive(Debug, Clone)]
enum Block {
    Plain(ConvBnAct),
    Inverted {
        expand: ConvBnAct,
        project: Conv2d,
        project_bn: BatchNorm,
        ir_expand: Linear,
        ir_expand_bn: BatchNorm,
        ir_dw: DepthwiseConv2d,
        ir_project: Linear,
        ir_project_bn: BatchNorm,
    },
}

const EXPANSION: usize = 4;

impl Block {
    fn new(b: &mut Builder<'_>, name: &str, kind: BlockKind, cin: usize, cout: usize) -> Self {
        match kind {
            BlockKind::PlainConv => Block::Plain(ConvBnAct::new(b, name, cin, cout, 3, 2)),
            BlockKind::InvertedBottleneck => {
                let mut s = b.sub(name);
                let hidden = cin * EXPANSION;
                let wide = cout * EXPANSION;
                Block::Inverted {
                    expand: ConvBnAct::new(&mut s, "expand", cin, hidden, 3, 2),
                    project: Conv2d::new(&mut s, "project", hidden, cout, 1, 1, 1, false),
                    project_bn: BatchNorm::new(&mut s, "project_bn", cout),
                    ir_expand: Linear::new(&mut s, "ir_expand", cout, wide, false),
                    ir_expand_bn: BatchNorm::new(&mut s, "ir_expand_bn", wide),
                    ir_dw: DepthwiseConv2d::new(&mut s, "ir_dw", wide, 3),
                    ir_project: Linear::new(&mut s, "ir_project", wide, cout, false),
                    ir_project_bn: BatchNorm::new(&mut s, "ir_project_bn", cout),
                }
            }
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Block::Plain(c) => c.forward(g, x),
            Block::Inverted {
                expand,
                project,
                project_bn,
                ir_expand,
                ir_expand_bn,
                ir_dw,
                ir_project,
                ir_project_bn,
            } => {
                let h = expand.forward(g, x);
                let h = project.forward(g, h);
                let y = project_bn.forward(g, h);
                let h = ir_expand.forward(g, y);
                let h = ir_expand_bn.forward(g, h);
                let h = g.relu(h);
                let h = ir_dw.forward(g, h);
                let h = g.relu(h);
                let h = ir_project.forward(g, h);
                let h = ir_project_bn.forward(g, h);
                g.add(y, h)
            }
        }
    }
}

/// One branch: three stride-2 blocks reach 1/8, then one block each for
/// 1/16 and 1/32.
#[derive(Debug, Clone)]
pub struct Stem {
    entry: [Block; 3],
    down16: Block,
    down32: Block,
}

impl Stem {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &StemConfig) -> Self {
        let mut s = b.sub(name);
        let [c8, c16, c32] = cfg.channels;
        let c2 = (c8 / 2).max(1);
        Self {
            entry: [
                Block::new(&mut s, "entry.0", cfg.block, 3, c2),
                Block::new(&mut s, "entry.1", cfg.block, c2, c8),
                Block::new(&mut s, "entry.2", cfg.block, c8, c8),
            ],
            down16: Block::new(&mut s, "down16", cfg.block, c8, c16),
            down32: Block::new(&mut s, "down32", cfg.block, c16, c32),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, image: Var) -> [Var; 3] {
        let mut x = image;
        for blk in &self.entry {
            x = blk.forward(g, x);
        }
        let f16 = self.down16.forward(g, x);
        let f32 = self.down32.forward(g, f16);
        [x, f16, f32]
    }
}

#[derive(Debug, Clone)]
pub struct Dspe {
    pub config: StemConfig,
    rgb: Stem,
    depth: Option<Stem>,
    projections: [Linear; 3],
}

impl Dspe {
    /// Registers parameters under `dspe.`.
    pub fn new(b: &mut Builder<'_>, config: StemConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let mut s = b.sub("dspe");
        let rgb = Stem::new(&mut s, "rgb", &config);
        let depth = (!config.shared).then(|| Stem::new(&mut s, "depth", &config));
        let projections = [0, 1, 2].map(|i| {
            Linear::new(
                &mut s,
                &alloc::format!("proj.{i}"),
                config.channels[i],
                dim,
                config.projection_bias,
            )
        });
        Ok(Self {
            config,
            rgb,
            depth,
            projections,
        })
    }

    /// Multi-scale features of one modality: `[B, H/s, W/s, C_s]` for
    /// s = 8, 16, 32.
    pub fn extract_pyramid(
        &self,
        g: &mut Graph<'_>,
        image: Var,
        branch: Branch,
    ) -> Result<[Var; 3]> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::InvalidShape(alloc::format!(
                "expected [B,H,W,3], got {s:?}"
            )));
        }
        check_input_size(s[1], s[2])?;
        let stem = match branch {
            Branch::Depth => self.depth.as_ref().unwrap_or(&self.rgb),
            Branch::Rgb => &self.rgb,
        };
        Ok(stem.forward(g, image))
    }

    /// Per level: `project(rgb + depth)`, giving `D` channels everywhere.
    pub fn fuse_and_project(
        &self,
        g: &mut Graph<'_>,
        rgb: [Var; 3],
        depth: [Var; 3],
    ) -> Result<[Var; 3]> {
        for (a, b) in rgb.iter().zip(&depth) {
            if g.shape(*a) != g.shape(*b) {
                return Err(Error::ShapeMismatch {
                    expected: g.shape(*a).to_vec(),
                    actual: g.shape(*b).to_vec(),
                });
            }
        }
        let mut out = rgb;
        for (i, o) in out.iter_mut().enumerate() {
            let sum = g.add(rgb[i], depth[i]);
            *o = self.projections[i].forward(g, sum);
        }
        Ok(out)
    }

    /// Heterogeneous spatial prior `[B, T_total, D]`. `zero_rgb` drops the RGB
    /// branch's features before fusion.
    pub fn build_prior(
        &self,
        g: &mut Graph<'_>,
        rgb: Var,
        depth3: Var,
        zero_rgb: bool,
    ) -> Result<Var> {
        let mut fr = self.extract_pyramid(g, rgb, Branch::Rgb)?;
        let fd = self.extract_pyramid(g, depth3, Branch::Depth)?;
        if zero_rgb {
            for f in fr.iter_mut() {
                *f = g.scale(*f, 0.0);
            }
        }
        let fused = self.fuse_and_project(g, fr, fd)?;
        Ok(flatten_concat_var(g, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::params::{Init, ParamStore};
    use crate::tensor::Tensor;

    fn build(cfg: StemConfig, dim: usize) -> (ParamStore, Dspe) {
        let mut store = ParamStore::new();
        let mut init = Init::new(1, 0.1);
        let d = Dspe::new(&mut Builder::new(&mut store, &mut init), cfg, dim).unwrap();
        (store, d)
    }

    #[test]
    fn pyramid_shapes() {
        for block in [BlockKind::PlainConv, BlockKind::InvertedBottleneck] {
            let cfg = StemConfig {
                channels: [4, 6, 8],
                block,
                ..StemConfig::default()
            };
            let (store, d) = build(cfg, 10);
            let mut g = Graph::new(&store, Mode::Train);
            let x = g.constant(Tensor::from_fn(&[2, 64, 32, 3], |i| (i % 17) as f64 / 17.0));
            let levels = d.extract_pyramid(&mut g, x, Branch::Rgb).unwrap();
            assert_eq!(g.shape(levels[0]), &[2, 8, 4, 4]);
            assert_eq!(g.shape(levels[1]), &[2, 4, 2, 6]);
            assert_eq!(g.shape(levels[2]), &[2, 2, 1, 8]);
            let prior = d.build_prior(&mut g, x, x, false).unwrap();
            assert_eq!(g.shape(prior), &[2, 32 + 8 + 2, 10]);
        }
    }

    #[test]
    fn shared_stem_has_fewer_parameters() {
        let (a, _) = build(StemConfig::default(), 8);
        let (b, _) = build(
            StemConfig {
                shared: true,
                ..StemConfig::default()
            },
            8,
        );
        assert!(b.len() < a.len());
        assert!(a.by_name("dspe.depth.entry.0.conv.weight").is_some());
        assert!(b.by_name("dspe.depth.entry.0.conv.weight").is_none());
    }

    #[test]
    fn rejects_bad_input_size() {
        let (store, d) = build(StemConfig::default(), 8);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 48, 64, 3]));
        assert!(d.extract_pyramid(&mut g, x, Branch::Depth).is_err());
        let x = g.constant(Tensor::zeros(&[1, 64, 64, 1]));
        assert!(matches!(
            d.extract_pyramid(&mut g, x, Branch::Depth),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn zeroed_rgb_prior_ignores_rgb() {
        let (store, d) = build(StemConfig::default(), 8);
        let prior = |rgb: f64| {
            let mut g = Graph::new(&store, Mode::Eval);
            let x = g.constant(Tensor::full(&[1, 32, 32, 3], rgb));
            let dep = g.constant(Tensor::from_fn(&[1, 32, 32, 3], |i| (i % 7) as f64 / 7.0));
            let p = d.build_prior(&mut g, x, dep, true).unwrap();
            g.value(p).clone()
        };
        assert_eq!(prior(0.1), prior(0.9));
    }
}
