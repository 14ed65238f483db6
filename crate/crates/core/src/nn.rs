//! Parameterized layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and builds its forward pass onto a [`Graph`].

use alloc::format;
use alloc::string::String;

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Init,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Init) -> Self {
        Self {
            store,
            init,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: self.name(name),
            store: self.store,
            init: self.init,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.into()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn random(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let t = self.init.trunc_normal(shape);
        let name = self.name(leaf);
        self.store.insert(&name, t, ParamKind::Weight)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store
            .insert(&name, Tensor::full(shape, value), ParamKind::Weight)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.insert(&name, value, ParamKind::Buffer)
    }
}

/// Fully connected layer over the last axis (also a 1×1 convolution on NHWC).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let mut s = b.sub(name);
        Self {
            weight: s.random("weight", &[input, output]),
            bias: bias.then(|| s.constant("bias", &[output], 0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.sub(name);
        Self {
            weight: s.random("weight", &[kernel * kernel * cin, cout]),
            bias: bias.then(|| s.constant("bias", &[cout], 0.0)),
            kernel,
            stride,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// Patch-style convolution: kernel equals stride, no padding.
    pub fn patchify(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        patch: usize,
    ) -> Self {
        let mut c = Self::new(b, name, cin, cout, patch, patch, 1, true);
        c.pad = 0;
        c
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.kernel, self.stride, self.pad, self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depth-wise kernel must be odd");
        let mut s = b.sub(name);
        Self {
            weight: s.random("weight", &[kernel, kernel, channels]),
            bias: s.constant("bias", &[channels], 0.0),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.depthwise_conv2d(x, w, Some(b), self.kernel)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.constant("weight", &[dim], 1.0),
            beta: s.constant("bias", &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.constant("weight", &[channels], 1.0),
            beta: s.constant("bias", &[channels], 0.0),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: s.buffer("running_var", Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(
            x,
            ga,
            be,
            self.running_mean,
            self.running_var,
            self.momentum,
        )
    }
}

/// Conv → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let mut s = b.sub(name);
        Self {
            conv: Conv2d::new(&mut s, "conv", cin, cout, kernel, stride, 1, false),
            bn: BatchNorm::new(&mut s, "bn", cout),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        g.relu(y)
    }
}

/// Multi-head attention with pre-normalized queries and keys/values:
/// `out(attend(Wq·LN(x), Wk·LN(ctx), Wv·LN(ctx)))`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of an attention block, plus the node holding its weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    pub attention: Var,
}

impl CrossAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            norm_query: LayerNorm::new(&mut s, "norm_query", dim),
            norm_context: LayerNorm::new(&mut s, "norm_context", dim),
            q: Linear::new(&mut s, "q", dim, dim, true),
            k: Linear::new(&mut s, "k", dim, dim, true),
            v: Linear::new(&mut s, "v", dim, dim, true),
            out: Linear::new(&mut s, "out", dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, query: Var, context: Var) -> Attended {
        let nq = self.norm_query.forward(g, query);
        let nc = self.norm_context.forward(g, context);
        let q = self.q.forward(g, nq);
        let k = self.k.forward(g, nc);
        let v = self.v.forward(g, nc);
        let attention = g.attention(q, k, v, self.heads);
        Attended {
            out: self.out.forward(g, attention),
            attention,
        }
    }
}

/// `fc2(GELU(fc1(x)))`
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", dim, hidden, true),
            fc2: Linear::new(&mut s, "fc2", hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}
