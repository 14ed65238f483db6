//! Recalibrated heterogeneous feature fusion.
//!
//! Both branches get an entropy-style confidence map: a ReLU class-logit map
//! `L` is turned into `σ(conv_{k,r}(−L ⊙ log(L + ε)))`. The spatial prior is
//! scaled by `(1 − C_V) ⊙ C_S` and then injected into the backbone tokens by
//! cross-attention behind a zero-initialized per-channel scale.

use alloc::string::ToString;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{Attended, BatchNorm, Builder, Conv2d, CrossAttention, Linear};
use crate::params::{ParamId, ParamStore};
use crate::pyramid::{flatten_concat_var, split_levels_var, PyramidLayout, VIT_LEVEL};
use crate::resize::ResizeMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhffConfig {
    pub num_classes: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub eps: f64,
    pub heads: usize,
    /// Interpolation used to carry the 1/16 backbone confidence to 1/8 and 1/32.
    pub align_mode: ResizeMode,
}

impl Default for RhffConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            kernel: 3,
            dilation: 2,
            eps: 1e-6,
            heads: 3,
            align_mode: ResizeMode::Bilinear,
        }
    }
}

impl RhffConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.kernel.is_multiple_of(2) {
            return bad("confidence kernel size must be odd");
        }
        if self.dilation == 0 {
            return bad("confidence dilation must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.align_mode == ResizeMode::Bicubic {
            return bad("confidence alignment must be bilinear or nearest");
        }
        Ok(())
    }
}

/// Logit head plus entropy convolution for one feature map.
#[derive(Debug, Clone)]
pub struct ConfidenceHead {
    pub logits: Linear,
    pub bn: BatchNorm,
    pub entropy: Conv2d,
    eps: f64,
}

impl ConfidenceHead {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, cfg: &RhffConfig) -> Self {
        let mut s = b.sub(name);
        Self {
            logits: Linear::new(&mut s, "logits", dim, cfg.num_classes, true),
            bn: BatchNorm::new(&mut s, "bn", cfg.num_classes),
            entropy: Conv2d::new(
                &mut s,
                "entropy",
                cfg.num_classes,
                1,
                cfg.kernel,
                1,
                cfg.dilation,
                true,
            ),
            eps: cfg.eps,
        }
    }

    /// `ReLU(BN(conv_1×1(grid)))` over a `[B, h, w, D]` grid.
    pub fn logit_map(&self, g: &mut Graph<'_>, grid: Var) -> Var {
        let l = self.logits.forward(g, grid);
        let l = self.bn.forward(g, l);
        g.relu(l)
    }

    /// `σ(conv_{k,r}(−L ⊙ log(L + ε)))`, one channel.
    pub fn confidence_from_logits(&self, g: &mut Graph<'_>, logits: Var) -> Var {
        let shifted = g.add_scalar(logits, self.eps);
        let log = g.log(shifted);
        let ent = g.mul(logits, log);
        let ent = g.neg(ent);
        let c = self.entropy.forward(g, ent);
        g.sigmoid(c)
    }

    pub fn forward(&self, g: &mut Graph<'_>, grid: Var) -> Var {
        let l = self.logit_map(g, grid);
        self.confidence_from_logits(g, l)
    }
}

/// Parameters of one fusion stage.
#[derive(Debug, Clone)]
pub struct RhffStage {
    pub vit_head: ConfidenceHead,
    pub prior_heads: [ConfidenceHead; 3],
    pub inject: CrossAttention,
    pub gamma: ParamId,
    align_mode: ResizeMode,
}

/// Which confidence factors take part in recalibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recalibration {
    pub use_vit_confidence: bool,
    pub use_prior_confidence: bool,
}

impl Default for Recalibration {
    fn default() -> Self {
        Self {
            use_vit_confidence: true,
            use_prior_confidence: true,
        }
    }
}

impl RhffStage {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, cfg: &RhffConfig) -> Self {
        let mut s = b.sub(name);
        let vit_head = ConfidenceHead::new(&mut s, "vit_conf", dim, cfg);
        let prior_heads = [0, 1, 2]
            .map(|i| ConfidenceHead::new(&mut s, &alloc::format!("prior_conf.{i}"), dim, cfg));
        Self {
            vit_head,
            prior_heads,
            inject: CrossAttention::new(&mut s, "inject", dim, cfg.heads),
            gamma: s.constant("gamma", &[dim], 0.0),
            align_mode: cfg.align_mode,
        }
    }

    /// Backbone-branch confidence: computed once on the 1/16 grid, resampled
    /// to 1/8 and 1/32 and laid out like the pyramid, `[B, T_total, 1]`.
    pub fn vit_confidence(&self, g: &mut Graph<'_>, vit: Var, layout: &PyramidLayout) -> Var {
        let b = g.shape(vit)[0];
        let d = g.shape(vit)[2];
        let l16 = layout.levels[VIT_LEVEL];
        let grid = g.reshape(vit, &[b, l16.grid_h, l16.grid_w, d]);
        let c16 = self.vit_head.forward(g, grid);
        let levels = layout
            .levels
            .map(|l| g.resize(c16, l.grid_h, l.grid_w, self.align_mode));
        flatten_concat_var(g, levels)
    }

    /// Prior-branch confidence, each level on its own grid, `[B, T_total, 1]`.
    pub fn prior_confidence(&self, g: &mut Graph<'_>, prior: Var, layout: &PyramidLayout) -> Var {
        let grids = split_levels_var(g, prior, layout);
        let mut conf = grids;
        for (i, c) in conf.iter_mut().enumerate() {
            *c = self.prior_heads[i].forward(g, grids[i]);
        }
        flatten_concat_var(g, conf)
    }

    /// `vit + γ ⊙ MHA(LN(vit), LN(prior))`; with γ = 0 this returns `vit`
    /// bit for bit.
    pub fn inject(&self, g: &mut Graph<'_>, vit: Var, prior: Var) -> (Var, Attended) {
        let att = self.inject.forward(g, vit, prior);
        let gamma = g.param(self.gamma);
        let scaled = g.mul(att.out, gamma);
        (g.add(vit, scaled), att)
    }
}

/// `(1 − C_V) ⊙ C_S ⊙ prior`, with either factor optionally replaced by 1.
pub fn recalibrate(
    g: &mut Graph<'_>,
    prior: Var,
    vit_conf: Var,
    prior_conf: Var,
    mode: Recalibration,
) -> Var {
    let mut out = prior;
    if mode.use_vit_confidence {
        let w = g.one_minus(vit_conf);
        out = g.mul(out, w);
    }
    if mode.use_prior_confidence {
        out = g.mul(out, prior_conf);
    }
    out
}

/// [`recalibrate`] on plain tensors: `prior` is `T × D`, confidences `T`
/// (or `T × 1`).
pub fn recalibrate_tensors(
    prior: &Tensor,
    vit_conf: &Tensor,
    prior_conf: &Tensor,
    mode: Recalibration,
) -> Result<Tensor> {
    let t = prior.shape().first().copied().unwrap_or(0);
    for c in [vit_conf, prior_conf] {
        if c.numel() != t {
            return Err(Error::ShapeMismatch {
                expected: alloc::vec![t, 1],
                actual: c.shape().to_vec(),
            });
        }
    }
    let d = prior.numel() / t.max(1);
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty, Mode::Eval);
    let p = g.constant(prior.clone().reshape(&[1, t, d])?);
    let cv = g.constant(vit_conf.clone().reshape(&[1, t, 1])?);
    let cs = g.constant(prior_conf.clone().reshape(&[1, t, 1])?);
    let out = recalibrate(&mut g, p, cv, cs, mode);
    g.value(out).clone().reshape(prior.shape())
}

/// Evaluate `σ(conv(−L ⊙ log(L + ε)))` of one head on an `h × w × C` logit map.
pub fn confidence_map(
    store: &ParamStore,
    head: &ConfidenceHead,
    logits: &Tensor,
) -> Result<Tensor> {
    let s = logits.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape(alloc::format!(
            "expected h×w×C logits, got {s:?}"
        )));
    }
    let mut g = Graph::new(store, Mode::Eval);
    let l = g.constant(logits.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let c = head.confidence_from_logits(&mut g, l);
    g.value(c).clone().reshape(&[s[0], s[1], 1])
}

/// Stage outputs exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct RhffTrace {
    pub vit_confidence: Var,
    pub prior_confidence: Var,
    pub recalibrated: Var,
    pub injected: Var,
    pub attention: Var,
}

pub(crate) fn stage_forward(
    stage: &RhffStage,
    g: &mut Graph<'_>,
    vit: Var,
    prior: Var,
    layout: &PyramidLayout,
    mode: Recalibration,
) -> RhffTrace {
    let cv = stage.vit_confidence(g, vit, layout);
    let cs = stage.prior_confidence(g, prior, layout);
    let rec = recalibrate(g, prior, cv, cs, mode);
    let (injected, att) = stage.inject(g, vit, rec);
    RhffTrace {
        vit_confidence: cv,
        prior_confidence: cs,
        recalibrated: rec,
        injected,
        attention: att.attention,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store_with(dim: usize, cfg: &RhffConfig) -> (ParamStore, RhffStage) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3, 0.2);
        let stage = RhffStage::new(&mut Builder::new(&mut store, &mut init), "s", dim, cfg);
        (store, stage)
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn recalibrate_scalar_and_boundaries() {
        let p = t(&[1, 1], &[2.0]);
        let half = t(&[1], &[0.5]);
        let out = recalibrate_tensors(&p, &half, &half, Recalibration::default()).unwrap();
        assert_eq!(out.data(), &[0.5]);
        let one = t(&[1], &[1.0]);
        let out = recalibrate_tensors(&p, &one, &half, Recalibration::default()).unwrap();
        assert_eq!(out.data(), &[0.0]);
        let off = Recalibration {
            use_vit_confidence: false,
            use_prior_confidence: false,
        };
        let out = recalibrate_tensors(&p, &half, &half, off).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn recalibrate_rejects_length_mismatch() {
        let p = t(&[2, 3], &[1.0; 6]);
        let c = t(&[3], &[0.5; 3]);
        assert!(matches!(
            recalibrate_tensors(&p, &c, &c, Recalibration::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn unit_logit_gives_half_confidence() {
        let cfg = RhffConfig {
            num_classes: 1,
            ..RhffConfig::default()
        };
        let (mut store, stage) = store_with(4, &cfg);
        let head = &stage.vit_head;
        // Centre tap 1, others 0: the conv is the identity.
        let mut w = Tensor::zeros(&[9, 1]);
        w.data_mut()[4] = 1.0;
        *store.get_mut(head.entropy.weight) = w;
        let c = confidence_map(&store, head, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert!((c.data()[0] - 0.5).abs() < 1e-6);
        // Entropy of a zero logit is exactly zero.
        let c = confidence_map(&store, head, &t(&[1, 1, 1], &[0.0])).unwrap();
        assert_eq!(c.data()[0], 0.5);
    }

    #[test]
    fn confidences_lie_in_open_unit_interval() {
        let cfg = RhffConfig::default();
        let (store, stage) = store_with(6, &cfg);
        let layout = PyramidLayout::for_input(64, 64).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let vit = g.constant(Tensor::from_fn(&[2, 16, 6], |i| (i as f64 * 0.37).sin()));
        let prior = g.constant(Tensor::from_fn(&[2, 84, 6], |i| (i as f64 * 0.11).cos()));
        let cv = stage.vit_confidence(&mut g, vit, &layout);
        let cs = stage.prior_confidence(&mut g, prior, &layout);
        assert_eq!(g.shape(cv), &[2, 84, 1]);
        assert_eq!(g.shape(cs), &[2, 84, 1]);
        for v in g.value(cv).data().iter().chain(g.value(cs).data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn zero_gamma_injection_is_identity() {
        let (store, stage) = store_with(6, &RhffConfig::default());
        let mut g = Graph::new(&store, Mode::Eval);
        let vit_t = Tensor::from_fn(&[1, 4, 6], |i| i as f64 * 0.1 - 1.0);
        let vit = g.constant(vit_t.clone());
        let prior = g.constant(Tensor::from_fn(&[1, 21, 6], |i| (i as f64).sin()));
        let (out, _) = stage.inject(&mut g, vit, prior);
        assert_eq!(g.value(out), &vit_t);
    }

    #[test]
    fn single_key_injection_adds_value() {
        let cfg = RhffConfig {
            heads: 2,
            ..RhffConfig::default()
        };
        let (mut store, stage) = store_with(4, &cfg);
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let a = &stage.inject;
        for l in [&a.v, &a.out] {
            *store.get_mut(l.weight) = eye.clone();
        }
        *store.get_mut(stage.gamma) = Tensor::full(&[4], 1.0);
        let ctx = [1.0, 2.0, 4.0, 7.0];
        let mut g = Graph::new(&store, Mode::Eval);
        let vit_t = t(&[1, 2, 4], &[0.5, -1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let vit = g.constant(vit_t.clone());
        let prior = g.constant(t(&[1, 1, 4], &ctx));
        let (out, _) = stage.inject(&mut g, vit, prior);
        let mean = ctx.iter().sum::<f64>() / 4.0;
        let var = ctx.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / 4.0;
        let ln: Vec<f64> = ctx
            .iter()
            .map(|c| (c - mean) / (var + 1e-6).sqrt())
            .collect();
        for (i, (o, x)) in g.value(out).data().iter().zip(vit_t.data()).enumerate() {
            assert!((o - x - ln[i % 4]).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let bad = RhffConfig {
            kernel: 2,
            ..RhffConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RhffConfig {
            align_mode: ResizeMode::Bicubic,
            ..RhffConfig::default()
        };
        assert!(bad.validate().is_err());
        RhffConfig::default().validate().unwrap();
    }
}
