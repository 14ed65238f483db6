//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read in
//! place from a borrowed [`ParamStore`]; only trainable ones (or all of them,
//! when requested) take part in the backward sweep. Ops panic on shape errors:
//! callers validate user-facing shapes before building the graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::resize::{self, AxisWeights, ResizeMode};
use crate::tensor::{broadcast_shape, for_each_broadcast, gemm, rm, tr, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        assert_eq!(input.len(), 4, "conv input must be NHWC, got {input:?}");
        let span = dilation * (kernel - 1) + 1;
        let out = |n: usize| (n + 2 * pad - span) / stride + 1;
        Self {
            batch: input[0],
            in_h: input[1],
            in_w: input[2],
            cin: input[3],
            out_h: out(input[1]),
            out_w: out(input[2]),
            cout,
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input pixel read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `y = scale * x + shift`
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Resize {
        x: Var,
        wy: AxisWeights,
        wx: AxisWeights,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum NormKind {
    /// Per-row over the last axis.
    Layer,
    /// Per-channel (last axis) with statistics from this batch.
    BatchStats,
    /// Per-channel with fixed running statistics.
    Running,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    freeze_norm_stats: bool,
    grad_all_params: bool,
    stat_updates: Vec<(ParamId, Tensor)>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Gradients of every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.param_vars.iter().enumerate().filter_map(|(i, v)| {
            let v = (*v)?;
            self.grads[v.0].as_ref().map(|g| (ParamId(i), g))
        })
    }
}

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            freeze_norm_stats: false,
            grad_all_params: false,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Use running normalization statistics even in training mode.
    pub fn freeze_norm_stats(&mut self, freeze: bool) {
        self.freeze_norm_stats = freeze;
    }

    /// Track gradients for frozen parameters as well (gradient checking).
    pub fn grad_all_params(&mut self, on: bool) {
        self.grad_all_params = on;
    }

    /// Running-statistic updates produced by batch-statistics normalization.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        core::mem::take(&mut self.stat_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.ng(v))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let needs = self.grad_all_params || self.params.is_trainable(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()));
        let mut out = vec![0.0; shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&shape, ta.shape(), tb.shape(), |o, ia, ib| {
            out[o] = f(da[ia], db[ib]);
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, out).unwrap(), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::log);
        let ng = self.ng(x);
        self.push(out, Op::Log(x), ng)
    }

    /// `x · w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let k = tx.last_dim();
        assert_eq!(
            tw.shape()[0],
            k,
            "linear: input {:?} vs weight {:?}",
            tx.shape(),
            tw.shape()
        );
        let n = tw.shape()[1];
        let m = tx.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            tx.data(),
            rm(k),
            tw.data(),
            rm(n),
            0.0,
            &mut out,
            rm(n),
        );
        if let Some(b) = b {
            let tb = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(tb) {
                    *o += bb;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w) || self.ng_opt(b);
        self.push(
            Tensor::from_vec(&shape, out).unwrap(),
            Op::Linear { x, w, b },
            ng,
        )
    }

    /// Dense convolution over NHWC input; `w` is `[kernel·kernel·cin, cout]`
    /// with taps ordered `(ky, kx, cin)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let geom = ConvGeom::new(tx.shape(), tw.shape()[1], kernel, stride, pad, dilation);
        assert_eq!(
            tw.shape()[0],
            geom.patch_len(),
            "conv2d weight {:?}",
            tw.shape()
        );
        let cols = im2col(tx.data(), &geom);
        let (m, k, n) = (geom.rows(), geom.patch_len(), geom.cout);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &cols,
            rm(k),
            tw.data(),
            rm(n),
            0.0,
            &mut out,
            rm(n),
        );
        if let Some(b) = b {
            let tb = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(tb) {
                    *o += bb;
                }
            }
        }
        let shape = [geom.batch, geom.out_h, geom.out_w, geom.cout];
        let ng = self.ng(x) || self.ng(w) || self.ng_opt(b);
        self.push(
            Tensor::from_vec(&shape, out).unwrap(),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Depth-wise stride-1 "same" convolution; `w` is `[kernel, kernel, ch]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let c = tx.last_dim();
        assert_eq!(tw.shape(), &[kernel, kernel, c], "depthwise weight");
        let geom = ConvGeom::new(tx.shape(), c, kernel, 1, kernel / 2, 1);
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; geom.rows() * c];
        for bi in 0..geom.batch {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let o = &mut out[((bi * geom.out_h + oy) * geom.out_w + ox) * c..][..c];
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            if let Some((iy, ix)) = geom.source(oy, ox, ky, kx) {
                                let s = &xd[((bi * geom.in_h + iy) * geom.in_w + ix) * c..][..c];
                                let wk = &wd[(ky * kernel + kx) * c..][..c];
                                for ch in 0..c {
                                    o[ch] += s[ch] * wk[ch];
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (v, bb) in o.iter_mut().zip(self.value(b).data()) {
                            *v += bb;
                        }
                    }
                }
            }
        }
        let shape = [geom.batch, geom.out_h, geom.out_w, c];
        let ng = self.ng(x) || self.ng(w) || self.ng_opt(b);
        self.push(
            Tensor::from_vec(&shape, out).unwrap(),
            Op::DepthwiseConv2d { x, w, b, geom },
            ng,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[r] = inv;
            for (o, v) in xhat[r * d..][..d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        self.finish_norm(x, gamma, beta, xhat, inv_std, NormKind::Layer)
    }

    /// Channel-wise batch normalization (channels on the last axis). Training
    /// mode normalizes with this batch's statistics and queues a running
    /// update; evaluation mode (or frozen statistics) uses the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
    ) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let m = tx.numel() / c;
        let use_batch = self.mode == Mode::Train && !self.freeze_norm_stats;
        let (mean, var) = if use_batch {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for row in tx.data().chunks(c) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for row in tx.data().chunks(c) {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (
                self.params.get(running_mean).data().to_vec(),
                self.params.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let mut xhat = vec![0.0; tx.numel()];
        for (orow, row) in xhat.chunks_mut(c).zip(tx.data().chunks(c)) {
            for ch in 0..c {
                orow[ch] = (row[ch] - mean[ch]) * inv_std[ch];
            }
        }
        if use_batch {
            let unbias = if m > 1 {
                m as f64 / (m - 1) as f64
            } else {
                1.0
            };
            let rm_old = self.params.get(running_mean);
            let rv_old = self.params.get(running_var);
            let new_mean = Tensor::from_fn(&[c], |i| {
                (1.0 - momentum) * rm_old.data()[i] + momentum * mean[i]
            });
            let new_var = Tensor::from_fn(&[c], |i| {
                (1.0 - momentum) * rv_old.data()[i] + momentum * var[i] * unbias
            });
            self.stat_updates.push((running_mean, new_mean));
            self.stat_updates.push((running_var, new_var));
        }
        let kind = if use_batch {
            NormKind::BatchStats
        } else {
            NormKind::Running
        };
        self.finish_norm(x, gamma, beta, xhat, inv_std, kind)
    }

    fn finish_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    ) -> Var {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d, "norm affine width");
        let mut out = vec![0.0; xhat.len()];
        for (orow, hrow) in out.chunks_mut(d).zip(xhat.chunks(d)) {
            for i in 0..d {
                orow[i] = hrow[i] * g[i] + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_vec(&shape, out).unwrap(),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
            ng,
        )
    }

    /// Scaled dot-product attention of `q: [B, Tq, D]` over `k, v: [B, Tk, D]`
    /// with `heads` equal-width heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (b, nq, d) = dims3(tq.shape());
        let (bk, nk, dk) = dims3(tk.shape());
        assert!(
            bk == b && dk == d && tv.shape() == tk.shape(),
            "attention shapes"
        );
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; b * heads * nq * nk];
        let mut out = vec![0.0; b * nq * d];
        let ds = d as isize;
        for bi in 0..b {
            let (qb, kb, vb) = (
                &tq.data()[bi * nq * d..][..nq * d],
                &tk.data()[bi * nk * d..][..nk * d],
                &tv.data()[bi * nk * d..][..nk * d],
            );
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * nq * nk..][..nq * nk];
                gemm(
                    nq,
                    dh,
                    nk,
                    &qb[h * dh..],
                    (ds, 1),
                    &kb[h * dh..],
                    (1, ds),
                    0.0,
                    p,
                    rm(nk),
                );
                for row in p.chunks_mut(nk) {
                    math::softmax_in_place(row, scale);
                }
                let ob = &mut out[bi * nq * d + h * dh..];
                gemm(
                    nq,
                    nk,
                    dh,
                    p,
                    rm(nk),
                    &vb[h * dh..],
                    (ds, 1),
                    0.0,
                    ob,
                    (ds, 1),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::from_vec(&[b, nq, d], out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Attention weights `[B, heads, Tq, Tk]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Resample an NHWC raster to `(out_h, out_w)`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Var {
        let tx = self.value(x);
        let (b, h, w, c) = dims4(tx.shape());
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let wy = AxisWeights::new(h, out_h, mode);
        let wx = AxisWeights::new(w, out_w, mode);
        let out = resize::forward(tx.data(), b, c, &wy, &wx);
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[b, out_h, out_w, c], out).unwrap(),
            Op::Resize { x, wy, wx },
            ng,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&ts, axis).expect("concat shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = self
            .value(x)
            .narrow(axis, start, len)
            .expect("narrow range");
        let ng = self.ng(x);
        self.push(out, Op::Narrow { x, axis, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape size");
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy over the last (class) axis of `logits`.
    /// `None` targets are ignored; with no counted element the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let tl = self.value(logits);
        let c = tl.last_dim();
        assert_eq!(tl.numel() / c, targets.len(), "one target per logit row");
        let mut probs = vec![0.0; tl.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for ((row, prow), t) in tl.data().chunks(c).zip(probs.chunks_mut(c)).zip(&targets) {
            let Some(t) = *t else { continue };
            assert!(t < c, "target {t} out of range for {c} classes");
            prow.copy_from_slice(row);
            let lse = math::softmax_in_place(prow, 1.0);
            total += lse - row[t];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            ng,
        )
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g.with_shape(self.value(v).shape())),
        }
    }

    fn acc_bias(&self, grads: &mut [Option<Tensor>], b: Option<Var>, gy: &[f64], n: usize) {
        if let Some(b) = b {
            if self.ng(b) {
                let mut gb = vec![0.0; n];
                for row in gy.chunks(n) {
                    for (a, g) in gb.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                self.acc(grads, b, Tensor::from_vec(&[n], gb).unwrap());
            }
        }
    }

    fn unbroadcast(
        &self,
        gy: &Tensor,
        target: Var,
        other: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let ts = self.value(target);
        let to = self.value(other);
        let mut g = vec![0.0; ts.numel()];
        let od = to.data();
        let gd = gy.data();
        for_each_broadcast(gy.shape(), ts.shape(), to.shape(), |o, it, io| {
            g[it] += f(gd[o], od[io]);
        });
        Tensor::from_vec(ts.shape(), g).unwrap()
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => return,
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    let g = self.unbroadcast(gy, *a, *b, |g, _| g);
                    self.acc(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = self.unbroadcast(gy, *b, *a, |g, _| g);
                    self.acc(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    let g = self.unbroadcast(gy, *a, *b, |g, _| g);
                    self.acc(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = self.unbroadcast(gy, *b, *a, |g, _| -g);
                    self.acc(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = self.unbroadcast(gy, *a, *b, |g, o| g * o);
                    self.acc(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = self.unbroadcast(gy, *b, *a, |g, o| g * o);
                    self.acc(grads, *b, g);
                }
            }
            Op::Affine(x, s) => self.acc(grads, *x, gy.map(|g| g * s)),
            Op::Relu(x) => {
                let g = gy
                    .zip_map(out, |g, y| if y > 0.0 { g } else { 0.0 })
                    .unwrap();
                self.acc(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = gy.zip_map(out, |g, y| g * y * (1.0 - y)).unwrap();
                self.acc(grads, *x, g);
            }
            Op::Gelu(x) => {
                let g = gy
                    .zip_map(self.value(*x), |g, v| g * math::gelu_grad(v))
                    .unwrap();
                self.acc(grads, *x, g);
            }
            Op::Log(x) => {
                let g = gy.zip_map(self.value(*x), |g, v| g / v).unwrap();
                self.acc(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let k = tx.last_dim();
                let n = tw.shape()[1];
                let m = tx.numel() / k;
                if self.ng(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        rm(n),
                        tw.data(),
                        tr(n),
                        0.0,
                        &mut gx,
                        rm(k),
                    );
                    self.acc(grads, *x, Tensor::from_vec(tx.shape(), gx).unwrap());
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        tx.data(),
                        tr(k),
                        gy.data(),
                        rm(n),
                        0.0,
                        &mut gw,
                        rm(n),
                    );
                    self.acc(grads, *w, Tensor::from_vec(&[k, n], gw).unwrap());
                }
                self.acc_bias(grads, *b, gy.data(), n);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let tw = self.value(*w);
                let (m, k, n) = (geom.rows(), geom.patch_len(), geom.cout);
                if self.ng(*x) {
                    let mut gcols = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        rm(n),
                        tw.data(),
                        tr(n),
                        0.0,
                        &mut gcols,
                        rm(k),
                    );
                    let gx = col2im(&gcols, geom);
                    let shape = [geom.batch, geom.in_h, geom.in_w, geom.cin];
                    self.acc(grads, *x, Tensor::from_vec(&shape, gx).unwrap());
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, cols, tr(k), gy.data(), rm(n), 0.0, &mut gw, rm(n));
                    self.acc(grads, *w, Tensor::from_vec(&[k, n], gw).unwrap());
                }
                self.acc_bias(grads, *b, gy.data(), n);
            }
            Op::DepthwiseConv2d { x, w, b, geom } => {
                let c = geom.cin;
                let kk = geom.kernel;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let gd = gy.data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..geom.batch {
                    for oy in 0..geom.out_h {
                        for ox in 0..geom.out_w {
                            let g = &gd[((bi * geom.out_h + oy) * geom.out_w + ox) * c..][..c];
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    if let Some((iy, ix)) = geom.source(oy, ox, ky, kx) {
                                        let base = ((bi * geom.in_h + iy) * geom.in_w + ix) * c;
                                        let wb = (ky * kk + kx) * c;
                                        for ch in 0..c {
                                            gx[base + ch] += g[ch] * wd[wb + ch];
                                            gw[wb + ch] += g[ch] * xd[base + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::from_vec(&xs, gx).unwrap());
                self.acc(grads, *w, Tensor::from_vec(&[kk, kk, c], gw).unwrap());
                self.acc_bias(grads, *b, gd, c);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => {
                let d = out.last_dim();
                let gam = self.value(*gamma).data();
                let gd = gy.data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                            gb[j] += grow[j];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::from_vec(&[d], gg).unwrap());
                    self.acc(grads, *beta, Tensor::from_vec(&[d], gb).unwrap());
                }
                if self.ng(*x) {
                    let gx = match kind {
                        NormKind::Layer => layer_norm_backward(gd, xhat, inv_std, gam, d),
                        NormKind::BatchStats => batch_norm_backward(gd, xhat, inv_std, gam, d),
                        NormKind::Running => gd
                            .chunks(d)
                            .flat_map(|row| (0..d).map(move |j| row[j] * gam[j] * inv_std[j]))
                            .collect(),
                    };
                    self.acc(grads, *x, Tensor::from_vec(out.shape(), gx).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gy, grads),
            Op::Resize { x, wy, wx } => {
                let (b, _, _, c) = dims4(self.value(*x).shape());
                let gx = resize::backward(gy.data(), b, c, wy, wx);
                let xs = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::from_vec(&xs, gx).unwrap());
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.ng(p) {
                        self.acc(grads, p, gy.narrow(*axis, start, len).unwrap());
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let span = xs[*axis] * inner;
                let len = gy.shape()[*axis] * inner;
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    gx[o * span + start * inner..][..len]
                        .copy_from_slice(&gy.data()[o * len..][..len]);
                }
                self.acc(grads, *x, Tensor::from_vec(xs, gx).unwrap());
            }
            Op::Reshape(x) => self.acc(grads, *x, gy.clone()),
            Op::Sum(x) => {
                let g = gy.data()[0];
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let c = *shape.last().unwrap();
                let mut g = vec![0.0; probs.len()];
                if *count > 0 {
                    let s = gy.data()[0] / *count as f64;
                    for ((grow, prow), t) in g.chunks_mut(c).zip(probs.chunks(c)).zip(targets) {
                        if let Some(t) = *t {
                            for j in 0..c {
                                grow[j] = s * prow[j];
                            }
                            grow[t] -= s;
                        }
                    }
                }
                self.acc(grads, *logits, Tensor::from_vec(&shape, g).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (b, nq, d) = dims3(tq.shape());
        let nk = tk.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let ds = d as isize;
        let mut gq = vec![0.0; tq.numel()];
        let mut gk = vec![0.0; tk.numel()];
        let mut gv = vec![0.0; tv.numel()];
        let mut dp = vec![0.0; nq * nk];
        for bi in 0..b {
            let qo = bi * nq * d;
            let ko = bi * nk * d;
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * nq * nk..][..nq * nk];
                let go = &gy.data()[qo + h * dh..];
                // dP = dO · Vᵀ
                gemm(
                    nq,
                    dh,
                    nk,
                    go,
                    (ds, 1),
                    &tv.data()[ko + h * dh..],
                    (1, ds),
                    0.0,
                    &mut dp,
                    rm(nk),
                );
                // dV = Pᵀ · dO
                gemm(
                    nk,
                    nq,
                    dh,
                    p,
                    tr(nk),
                    go,
                    (ds, 1),
                    0.0,
                    &mut gv[ko + h * dh..],
                    (ds, 1),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for (drow, prow) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    &dp,
                    rm(nk),
                    &tk.data()[ko + h * dh..],
                    (ds, 1),
                    0.0,
                    &mut gq[qo + h * dh..],
                    (ds, 1),
                );
                gemm(
                    nk,
                    nq,
                    dh,
                    &dp,
                    tr(nk),
                    &tq.data()[qo + h * dh..],
                    (ds, 1),
                    0.0,
                    &mut gk[ko + h * dh..],
                    (ds, 1),
                );
            }
        }
        self.acc(grads, q, Tensor::from_vec(tq.shape(), gq).unwrap());
        self.acc(grads, k, Tensor::from_vec(tk.shape(), gk).unwrap());
        self.acc(grads, v, Tensor::from_vec(tv.shape(), gv).unwrap());
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected NHWC tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut cols[((b * g.out_h + oy) * g.out_w + ox) * plen..][..plen];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let src = &x[((b * g.in_h + iy) * g.in_w + ix) * g.cin..][..g.cin];
                            row[(ky * g.kernel + kx) * g.cin..][..g.cin].copy_from_slice(src);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut x = vec![0.0; g.batch * g.in_h * g.in_w * g.cin];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &cols[((b * g.out_h + oy) * g.out_w + ox) * plen..][..plen];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let dst = &mut x[((b * g.in_h + iy) * g.in_w + ix) * g.cin..][..g.cin];
                            let src = &row[(ky * g.kernel + kx) * g.cin..][..g.cin];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn layer_norm_backward(
    gy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    d: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; gy.len()];
    let dn = d as f64;
    for (r, ((grow, hrow), orow)) in gy
        .chunks(d)
        .zip(xhat.chunks(d))
        .zip(gx.chunks_mut(d))
        .enumerate()
    {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            let gh = grow[j] * gamma[j];
            s1 += gh;
            s2 += gh * hrow[j];
        }
        for j in 0..d {
            let gh = grow[j] * gamma[j];
            orow[j] = inv_std[r] / dn * (dn * gh - s1 - hrow[j] * s2);
        }
    }
    gx
}

fn batch_norm_backward(
    gy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    c: usize,
) -> Vec<f64> {
    let m = (gy.len() / c) as f64;
    let mut s1 = vec![0.0; c];
    let mut s2 = vec![0.0; c];
    for (grow, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            let gh = grow[j] * gamma[j];
            s1[j] += gh;
            s2[j] += gh * hrow[j];
        }
    }
    let mut gx = vec![0.0; gy.len()];
    for ((grow, hrow), orow) in gy.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)) {
        for j in 0..c {
            let gh = grow[j] * gamma[j];
            orow[j] = inv_std[j] / m * (m * gh - s1[j] - hrow[j] * s2[j]);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn ramp(shape: &[usize], offset: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i * 7919 + 13) % 29) as f64 / 29.0 - 0.5 + offset)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn weighted_loss(g: &mut Graph<'_>, out: Var) -> Var {
        let w = ramp(g.shape(out), 0.1);
        let w = g.constant(w);
        let p = g.mul(out, w);
        g.sum(p)
    }

    /// Central differences of `Σ w ⊙ f(inputs)` against the reverse sweep.
    fn check(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
        let mut g = Graph::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = weighted_loss(&mut g, out);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new(store, Mode::Train);
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            let l = weighted_loss(&mut g, out);
            g.value(l).data()[0]
        };
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).expect("leaf gradient");
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-7 + 1e-5 * numeric.abs(),
                    "input {i} element {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn empty() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let ins = [ramp(&[2, 3, 4], 0.0), ramp(&[1, 3, 1], 0.3)];
        check(&empty(), &ins, |g, v| {
            let a = g.add(v[0], v[1]);
            let b = g.mul(a, v[1]);
            let c = g.sub(b, v[0]);
            g.affine(c, 1.5, -0.2)
        });
    }

    #[test]
    fn pointwise_gradients() {
        let ins = [ramp(&[3, 5], 0.05)];
        check(&empty(), &ins, |g, v| {
            let s = g.sigmoid(v[0]);
            let e = g.gelu(v[0]);
            let r = g.relu(v[0]);
            let p = g.add_scalar(s, 0.5);
            let l = g.log(p);
            let a = g.add(l, e);
            g.add(a, r)
        });
    }

    #[test]
    fn linear_gradients() {
        let ins = [ramp(&[2, 3, 4], 0.0), ramp(&[4, 5], 0.1), ramp(&[5], -0.2)];
        check(&empty(), &ins, |g, v| g.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn conv2d_gradients() {
        let ins = [
            ramp(&[1, 5, 6, 2], 0.0),
            ramp(&[18, 3], 0.05),
            ramp(&[3], 0.0),
        ];
        check(&empty(), &ins, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 3, 2, 2, 2)
        });
        check(&empty(), &ins[..2], |g, v| {
            g.conv2d(v[0], v[1], None, 3, 1, 1, 1)
        });
    }

    #[test]
    fn depthwise_gradients() {
        let ins = [
            ramp(&[2, 4, 5, 3], 0.0),
            ramp(&[3, 3, 3], 0.1),
            ramp(&[3], 0.0),
        ];
        check(&empty(), &ins, |g, v| {
            g.depthwise_conv2d(v[0], v[1], Some(v[2]), 3)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let ins = [ramp(&[2, 3, 4], 0.0), ramp(&[4], 1.0), ramp(&[4], 0.0)];
        check(&empty(), &ins, |g, v| g.layer_norm(v[0], v[1], v[2]));
    }

    fn bn_store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let m = s.insert("m", Tensor::zeros(&[4]), ParamKind::Buffer);
        let v = s.insert("v", Tensor::full(&[4], 1.0), ParamKind::Buffer);
        (s, m, v)
    }

    #[test]
    fn batch_norm_gradients() {
        let (s, m, rv) = bn_store();
        let ins = [ramp(&[2, 3, 3, 4], 0.0), ramp(&[4], 1.0), ramp(&[4], 0.0)];
        check(&s, &ins, |g, v| g.batch_norm(v[0], v[1], v[2], m, rv, 0.1));
    }

    #[test]
    fn batch_norm_modes() {
        let (s, m, rv) = bn_store();
        let x = ramp(&[4, 4], 0.0);
        let mut g = Graph::new(&s, Mode::Train);
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        g.batch_norm(xv, one, zero, m, rv, 0.1);
        let updates = g.take_stat_updates();
        assert_eq!(updates.len(), 2);
        // Column 0 holds rows 0, 4, 8, 12 of the ramp.
        let col: Vec<f64> = (0..4).map(|r| x.data()[r * 4]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / 3.0;
        assert!((updates[0].1.data()[0] - 0.1 * mean).abs() < 1e-15);
        assert!((updates[1].1.data()[0] - (0.9 + 0.1 * var)).abs() < 1e-15);

        let mut g = Graph::new(&s, Mode::Eval);
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.batch_norm(xv, one, zero, m, rv, 0.1);
        assert!(g.take_stat_updates().is_empty());
        let scale = 1.0 / libm::sqrt(1.0 + 1e-5);
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-15);
        }

        let mut g = Graph::new(&s, Mode::Train);
        g.freeze_norm_stats(true);
        let xv = g.constant(x);
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        g.batch_norm(xv, one, zero, m, rv, 0.1);
        assert!(g.take_stat_updates().is_empty());
    }

    #[test]
    fn attention_gradients_and_rows() {
        let ins = [
            ramp(&[2, 3, 4], 0.0),
            ramp(&[2, 5, 4], 0.2),
            ramp(&[2, 5, 4], -0.1),
        ];
        check(&empty(), &ins, |g, v| g.attention(v[0], v[1], v[2], 2));
        let s = empty();
        let mut g = Graph::new(&s, Mode::Eval);
        let v: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = g.attention(v[0], v[1], v[2], 2);
        let probs = g.attention_probs(out).unwrap();
        for row in probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_gradients() {
        let ins = [ramp(&[1, 3, 4, 2], 0.0)];
        for mode in [
            ResizeMode::Bilinear,
            ResizeMode::Bicubic,
            ResizeMode::Nearest,
        ] {
            check(&empty(), &ins, |g, v| g.resize(v[0], 5, 2, mode));
        }
    }

    #[test]
    fn structural_gradients() {
        let ins = [ramp(&[2, 3, 4], 0.0), ramp(&[2, 2, 4], 0.1)];
        check(&empty(), &ins, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let n = g.narrow(c, 1, 1, 3);
            let r = g.reshape(n, &[6, 4]);
            let m = g.mean(r);
            g.mul(r, m)
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        let ins = [ramp(&[4, 3], 0.0)];
        check(&empty(), &ins, |g, v| {
            g.cross_entropy(v[0], alloc::vec![Some(0), None, Some(2), Some(1)])
        });
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let s = empty();
        let mut g = Graph::new(&s, Mode::Train);
        let l = g.leaf(ramp(&[3, 2], 0.0));
        let loss = g.cross_entropy(l, alloc::vec![None, None, None]);
        assert_eq!(g.value(loss).data(), &[0.0]);
        let grads = g.backward(loss);
        assert!(grads
            .wrt(l)
            .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let s = empty();
        let mut g = Graph::new(&s, Mode::Train);
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.leaf(Tensor::full(&[2], 2.0));
        let p = g.mul(a, b);
        let loss = g.sum(p);
        let grads = g.backward(loss);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 1.0]);
    }
}
