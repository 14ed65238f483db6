//! Holistic gated feature integration: sigmoid gates on both branches,
//! gated aggregation over the stage history, and the extractor block that
//! refreshes the spatial prior from the integrated backbone tokens.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{Attended, Builder, CrossAttention, DepthwiseConv2d, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::pyramid::{flatten_concat_var, split_levels_var, PyramidLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HgfiConfig {
    /// Depth-wise gate kernels for the 1/8, 1/16 and 1/32 levels.
    pub gate_kernels: [usize; 3],
    pub ffn_ratio: f64,
    pub heads: usize,
}

impl Default for HgfiConfig {
    fn default() -> Self {
        Self {
            gate_kernels: [7, 5, 3],
            ffn_ratio: 4.0,
            heads: 3,
        }
    }
}

impl HgfiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gate_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidConfig("gate kernels must be odd".to_string()));
        }
        if !(self.ffn_ratio > 0.0) {
            return Err(Error::InvalidConfig(
                "ffn_ratio must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Features of completed stages and the gates computed for them.
#[derive(Debug, Clone, Default)]
pub struct StageHistory {
    pub vit: Vec<(Var, Var)>,
    pub prior: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct HgfiStage {
    pub vit_gate: Linear,
    pub prior_gates: [DepthwiseConv2d; 3],
    pub extractor: CrossAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

impl HgfiStage {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, cfg: &HgfiConfig) -> Self {
        let mut s = b.sub(name);
        let vit_gate = Linear::new(&mut s, "vit_gate", dim, dim, true);
        let prior_gates = [0, 1, 2].map(|i| {
            DepthwiseConv2d::new(
                &mut s,
                &alloc::format!("prior_gate.{i}"),
                dim,
                cfg.gate_kernels[i],
            )
        });
        let hidden = libm::round(dim as f64 * cfg.ffn_ratio) as usize;
        Self {
            vit_gate,
            prior_gates,
            extractor: CrossAttention::new(&mut s, "extractor", dim, cfg.heads),
            ffn_norm: LayerNorm::new(&mut s, "ffn_norm", dim),
            ffn: Mlp::new(&mut s, "ffn", dim, hidden.max(1)),
        }
    }

    /// `σ(conv_1×1(tokens))` per token and channel.
    pub fn vit_gate(&self, g: &mut Graph<'_>, vit: Var) -> Var {
        let z = self.vit_gate.forward(g, vit);
        g.sigmoid(z)
    }

    /// `σ(DW_{k_t}(level))` on each pyramid level, concatenated.
    pub fn prior_gate(&self, g: &mut Graph<'_>, prior: Var, layout: &PyramidLayout) -> Var {
        let grids = split_levels_var(g, prior, layout);
        let mut gates = grids;
        for (i, gt) in gates.iter_mut().enumerate() {
            let z = self.prior_gates[i].forward(g, grids[i]);
            *gt = g.sigmoid(z);
        }
        flatten_concat_var(g, gates)
    }

    /// `F̂ = F_S + MHA(LN(F_S), LN(F_V))`, then `F̂ + FFN(LN(F̂))`.
    pub fn extract(&self, g: &mut Graph<'_>, prior: Var, vit: Var) -> (Var, Attended) {
        let att = self.extractor.forward(g, prior, vit);
        let fhat = g.add(prior, att.out);
        let h = self.ffn_norm.forward(g, fhat);
        let h = self.ffn.forward(g, h);
        (g.add(fhat, h), att)
    }
}

/// `(1 + G) ⊙ F + (1 − G) ⊙ Σ_l G_l ⊙ F_l` over the given history.
pub fn integrate(g: &mut Graph<'_>, current: Var, gate: Var, history: &[(Var, Var)]) -> Var {
    let keep = g.add_scalar(gate, 1.0);
    let out = g.mul(keep, current);
    if history.is_empty() {
        return out;
    }
    let mut acc: Option<Var> = None;
    for &(f, gl) in history {
        let term = g.mul(gl, f);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    let open = g.one_minus(gate);
    let carried = g.mul(open, acc.unwrap());
    g.add(out, carried)
}

/// [`integrate`] on plain tensors of one common shape.
pub fn integrate_tensors(
    current: &Tensor,
    gate: &Tensor,
    history: &[(Tensor, Tensor)],
) -> Result<Tensor> {
    let shape = current.shape();
    for t in core::iter::once(gate).chain(history.iter().flat_map(|(f, gl)| [f, gl])) {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty, Mode::Eval);
    let c = g.constant(current.clone());
    let gt = g.constant(gate.clone());
    let hist: Vec<(Var, Var)> = history
        .iter()
        .map(|(f, gl)| (g.constant(f.clone()), g.constant(gl.clone())))
        .collect();
    let out = integrate(&mut g, c, gt, &hist);
    Ok(g.value(out).clone())
}
