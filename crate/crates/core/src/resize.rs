//! Separable spatial resampling of NHWC rasters.
//!
//! Every supported mode is linear in its input, so a resize is fully described
//! by one sparse weight row per output coordinate along each axis. The same
//! tables drive the forward pass and (transposed) the backward pass.

use alloc::vec::Vec;

/// Interpolation kernel. Coordinates follow the half-pixel convention
/// (corners not aligned).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
    Bicubic,
}

/// Sparse interpolation weights along one axis: `rows[o]` lists
/// `(input_index, weight)` pairs for output coordinate `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    pub input_len: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    pub fn new(input_len: usize, output_len: usize, mode: ResizeMode) -> Self {
        let scale = input_len as f64 / output_len as f64;
        let rows = (0..output_len)
            .map(|o| {
                if input_len == output_len {
                    return alloc::vec![(o, 1.0)];
                }
                match mode {
                    ResizeMode::Nearest => {
                        let i = libm::floor(o as f64 * scale) as usize;
                        alloc::vec![(i.min(input_len - 1), 1.0)]
                    }
                    ResizeMode::Bilinear => {
                        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                        let i0 = (libm::floor(src) as usize).min(input_len - 1);
                        let i1 = (i0 + 1).min(input_len - 1);
                        let t = src - i0 as f64;
                        if i0 == i1 || t == 0.0 {
                            alloc::vec![(i0, 1.0)]
                        } else {
                            alloc::vec![(i0, 1.0 - t), (i1, t)]
                        }
                    }
                    ResizeMode::Bicubic => {
                        let src = (o as f64 + 0.5) * scale - 0.5;
                        let base = libm::floor(src);
                        let t = src - base;
                        let w = cubic_weights(t);
                        let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                        for (k, wk) in w.iter().enumerate() {
                            let idx = (base as isize - 1 + k as isize)
                                .clamp(0, input_len as isize - 1)
                                as usize;
                            match row.iter_mut().find(|(i, _)| *i == idx) {
                                Some(e) => e.1 += wk,
                                None => row.push((idx, *wk)),
                            }
                        }
                        row
                    }
                }
            })
            .collect();
        Self { input_len, rows }
    }

    pub fn output_len(&self) -> usize {
        self.rows.len()
    }
}

/// Keys cubic convolution weights with `a = -0.75`.
fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Resize `x` of shape `[batch, ih, iw, ch]` to `[batch, oh, ow, ch]`.
pub(crate) fn forward(
    x: &[f64],
    batch: usize,
    ch: usize,
    wy: &AxisWeights,
    wx: &AxisWeights,
) -> Vec<f64> {
    let (ih, iw) = (wy.input_len, wx.input_len);
    let (oh, ow) = (wy.output_len(), wx.output_len());
    // width pass: [b, ih, ow, ch]
    let mut tmp = alloc::vec![0.0; batch * ih * ow * ch];
    for b in 0..batch {
        for y in 0..ih {
            let src = &x[(b * ih + y) * iw * ch..][..iw * ch];
            let dst = &mut tmp[(b * ih + y) * ow * ch..][..ow * ch];
            for (ox, row) in wx.rows.iter().enumerate() {
                let d = &mut dst[ox * ch..][..ch];
                for &(ix, w) in row {
                    let s = &src[ix * ch..][..ch];
                    for c in 0..ch {
                        d[c] += w * s[c];
                    }
                }
            }
        }
    }
    let mut out = alloc::vec![0.0; batch * oh * ow * ch];
    let line = ow * ch;
    for b in 0..batch {
        for (oy, row) in wy.rows.iter().enumerate() {
            let d = &mut out[(b * oh + oy) * line..][..line];
            for &(iy, w) in row {
                let s = &tmp[(b * ih + iy) * line..][..line];
                for i in 0..line {
                    d[i] += w * s[i];
                }
            }
        }
    }
    out
}

/// Adjoint of [`forward`]: maps an output gradient back to the input grid.
pub(crate) fn backward(
    grad: &[f64],
    batch: usize,
    ch: usize,
    wy: &AxisWeights,
    wx: &AxisWeights,
) -> Vec<f64> {
    let (ih, iw) = (wy.input_len, wx.input_len);
    let (oh, ow) = (wy.output_len(), wx.output_len());
    let line = ow * ch;
    let mut tmp = alloc::vec![0.0; batch * ih * ow * ch];
    for b in 0..batch {
        for (oy, row) in wy.rows.iter().enumerate() {
            let g = &grad[(b * oh + oy) * line..][..line];
            for &(iy, w) in row {
                let d = &mut tmp[(b * ih + iy) * line..][..line];
                for i in 0..line {
                    d[i] += w * g[i];
                }
            }
        }
    }
    let mut out = alloc::vec![0.0; batch * ih * iw * ch];
    for b in 0..batch {
        for y in 0..ih {
            let src = &tmp[(b * ih + y) * ow * ch..][..ow * ch];
            let dst = &mut out[(b * ih + y) * iw * ch..][..iw * ch];
            for (ox, row) in wx.rows.iter().enumerate() {
                let g = &src[ox * ch..][..ch];
                for &(ix, w) in row {
                    let d = &mut dst[ix * ch..][..ch];
                    for c in 0..ch {
                        d[c] += w * g[c];
                    }
                }
            }
        }
    }
    out
}
