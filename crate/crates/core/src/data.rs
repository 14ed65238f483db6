//! RGB-D samples, the synthetic desk-scale scene generator, depth
//! normalization and training-time augmentation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{BatchInput, DEFAULT_IGNORE_INDEX};
use crate::pyramid::check_input_size;
use crate::resize::{AxisWeights, ResizeMode};
use crate::tensor::Tensor;

/// One image triple. `rgb` and `depth3` are `[H, W, 3]` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub rgb: Tensor,
    pub depth3: Tensor,
    pub labels: Vec<u8>,
}

impl RgbdSample {
    pub fn new(rgb: Tensor, depth3: Tensor, labels: Vec<u8>) -> Result<Self> {
        let s = rgb.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::InvalidShape(alloc::format!(
                "expected H×W×3 rgb, got {s:?}"
            )));
        }
        if depth3.shape() != s {
            return Err(Error::ShapeMismatch {
                expected: s.to_vec(),
                actual: depth3.shape().to_vec(),
            });
        }
        if labels.len() != s[0] * s[1] {
            return Err(Error::ShapeMismatch {
                expected: vec![s[0], s[1]],
                actual: vec![labels.len()],
            });
        }
        Ok(Self {
            rgb,
            depth3,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }
}

/// Stack equally sized samples into a network batch and flat labels.
pub fn stack(samples: &[RgbdSample]) -> Result<(BatchInput, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidShape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut rgb = Vec::with_capacity(samples.len() * h * w * 3);
    let mut depth = Vec::with_capacity(rgb.capacity());
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.rgb.shape() != first.rgb.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.rgb.shape().to_vec(),
                actual: s.rgb.shape().to_vec(),
            });
        }
        rgb.extend_from_slice(s.rgb.data());
        depth.extend_from_slice(s.depth3.data());
        labels.extend_from_slice(&s.labels);
    }
    let shape = [samples.len(), h, w, 3];
    let input = BatchInput::new(
        Tensor::from_vec(&shape, rgb)?,
        Tensor::from_vec(&shape, depth)?,
    )?;
    Ok((input, labels))
}

/// Min-max normalize an `H × W` (or `H × W × 1`) raster and replicate it to
/// three channels. A constant raster maps to zeros.
pub fn normalize_depth(raw: &Tensor) -> Result<Tensor> {
    let s = raw.shape();
    let (h, w) = match s {
        [h, w] | [h, w, 1] => (*h, *w),
        _ => {
            return Err(Error::InvalidShape(alloc::format!(
                "expected H×W depth, got {s:?}"
            )))
        }
    };
    if let Some(i) = raw.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let (lo, hi) = (raw.min(), raw.max());
    let range = hi - lo;
    let mut out = Vec::with_capacity(h * w * 3);
    for &v in raw.data() {
        let n = if range > 0.0 { (v - lo) / range } else { 0.0 };
        out.extend_from_slice(&[n, n, n]);
    }
    Tensor::from_vec(&[h, w, 3], out)
}

/// Replicate an already normalized `H × W` raster to three channels.
pub fn replicate_depth(depth: &Tensor) -> Result<Tensor> {
    let s = depth.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape(alloc::format!(
            "expected H×W depth, got {s:?}"
        )));
    }
    let data = depth.data().iter().flat_map(|&v| [v, v, v]).collect();
    Tensor::from_vec(&[s[0], s[1], 3], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Inclusive range of foreground regions per scene.
    pub regions: (usize, usize),
    /// Per-pixel colour noise standard deviation.
    pub texture: f64,
    /// Gaussian noise added to depth before normalization.
    pub depth_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            regions: (3, 8),
            texture: 0.02,
            depth_noise: 0.0,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

fn class_color(class: usize) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()];
    // Classes beyond the palette get a darkened variant.
    let dim = 1.0 / (1 + class / PALETTE.len()) as f64;
    base.map(|c| c * dim)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Render a synthetic scene with default settings.
pub fn synth_scene(seed: u64, height: usize, width: usize, classes: usize) -> Result<RgbdSample> {
    synth_scene_with(seed, height, width, classes, &SynthConfig::default())
}

/// Background (class 0, farthest) plus axis-aligned and elliptical regions.
/// Each class gets one depth per scene, so every connected label region has
/// constant depth; regions are painted far to near.
pub fn synth_scene_with(
    seed: u64,
    height: usize,
    width: usize,
    classes: usize,
    cfg: &SynthConfig,
) -> Result<RgbdSample> {
    check_input_size(height, width)?;
    if classes < 2 {
        return Err(Error::InvalidConfig(
            "synthetic scenes need at least 2 classes".into(),
        ));
    }
    if cfg.regions.0 > cfg.regions.1 {
        return Err(Error::InvalidConfig("region range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut class_depth: Vec<f64> = (0..classes).map(|c| (c + 1) as f64).collect();
    class_depth[1..].shuffle(&mut rng);
    // Background stays farthest.
    class_depth[0] = (classes + 1) as f64;

    let n = rng.random_range(cfg.regions.0..=cfg.regions.1);
    let (hf, wf) = (height as f64, width as f64);
    let mut regions: Vec<(usize, Shape, [f64; 3])> = (0..n)
        .map(|_| {
            let class = rng.random_range(1..classes);
            let sh = rng.random_range(0.15..0.5) * hf;
            let sw = rng.random_range(0.15..0.5) * wf;
            let cy = rng.random_range(0.0..hf);
            let cx = rng.random_range(0.0..wf);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    y0: cy - sh / 2.0,
                    x0: cx - sw / 2.0,
                    y1: cy + sh / 2.0,
                    x1: cx + sw / 2.0,
                }
            } else {
                Shape::Ellipse {
                    cy,
                    cx,
                    ry: sh / 2.0,
                    rx: sw / 2.0,
                }
            };
            let base = class_color(class);
            let jitter = [0, 1, 2].map(|_| rng.random_range(-0.08..0.08));
            let albedo = [0, 1, 2].map(|i| (base[i] + jitter[i]).clamp(0.0, 1.0));
            (class, shape, albedo)
        })
        .collect();
    regions.sort_by(|a, b| class_depth[b.0].total_cmp(&class_depth[a.0]));

    let bg = class_color(0);
    let mut labels = vec![0u8; height * width];
    let mut albedo = vec![bg; height * width];
    for (class, shape, col) in &regions {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * width + x] = *class as u8;
                    albedo[y * width + x] = *col;
                }
            }
        }
    }

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rgb = Vec::with_capacity(height * width * 3);
    for a in &albedo {
        for &c in a {
            let v = c + cfg.texture * noise.sample(&mut rng);
            rgb.push(v.clamp(0.0, 1.0));
        }
    }
    let raw: Vec<f64> = labels
        .iter()
        .map(|&l| class_depth[l as usize] + cfg.depth_noise * noise.sample(&mut rng))
        .collect();
    let depth3 = normalize_depth(&Tensor::from_vec(&[height, width], raw)?)?;
    RgbdSample::new(Tensor::from_vec(&[height, width, 3], rgb)?, depth3, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_size: usize,
    /// Random rescale ratio range relative to the input size.
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Apply each photometric distortion with this probability.
    pub photometric_prob: f64,
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub ignore_index: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 448,
            scale_range: (0.5, 2.0),
            flip_prob: 0.5,
            photometric_prob: 0.5,
            brightness: 32.0 / 255.0,
            contrast: (0.5, 1.5),
            saturation: (0.5, 1.5),
            ignore_index: DEFAULT_IGNORE_INDEX,
        }
    }
}

fn resize_hw3(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = t.shape();
    let wy = AxisWeights::new(s[0], oh, ResizeMode::Bilinear);
    let wx = AxisWeights::new(s[1], ow, ResizeMode::Bilinear);
    let data = crate::resize::forward(t.data(), 1, s[2], &wy, &wx);
    Tensor::from_vec(&[oh, ow, s[2]], data).expect("resize output size")
}

fn resize_labels(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let wy = AxisWeights::new(h, oh, ResizeMode::Nearest);
    let wx = AxisWeights::new(w, ow, ResizeMode::Nearest);
    let mut out = Vec::with_capacity(oh * ow);
    for ry in &wy.rows {
        for rx in &wx.rows {
            out.push(labels[ry[0].0 * w + rx[0].0]);
        }
    }
    out
}

/// Copy the window `[y0, y0+oh) × [x0, x0+ow)` of a `h × w × c` raster,
/// filling outside pixels with `fill`, optionally mirrored horizontally.
fn window<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    y0: usize,
    x0: usize,
    oh: usize,
    ow: usize,
    flip: bool,
    fill: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let sx = if flip { ow - 1 - x } else { x };
            let (yy, xx) = (y0 + y, x0 + sx);
            if yy < h && xx < w {
                out.extend_from_slice(&src[(yy * w + xx) * c..(yy * w + xx + 1) * c]);
            } else {
                out.extend(core::iter::repeat_n(fill, c));
            }
        }
    }
    out
}

/// Rescale, pad, crop and flip all three rasters identically (labels by
/// nearest neighbour), then distort the colours of `rgb` only.
pub fn augment<R: Rng + ?Sized>(
    sample: &RgbdSample,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<RgbdSample> {
    check_input_size(cfg.crop_size, cfg.crop_size)?;
    let (h, w) = (sample.height(), sample.width());
    let (lo, hi) = cfg.scale_range;
    let ratio = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let oh = libm::round(h as f64 * ratio).max(1.0) as usize;
    let ow = libm::round(w as f64 * ratio).max(1.0) as usize;
    let (rgb, depth, labels) = if (oh, ow) == (h, w) {
        (
            sample.rgb.clone(),
            sample.depth3.clone(),
            sample.labels.clone(),
        )
    } else {
        (
            resize_hw3(&sample.rgb, oh, ow),
            resize_hw3(&sample.depth3, oh, ow),
            resize_labels(&sample.labels, h, w, oh, ow),
        )
    };

    let cs = cfg.crop_size;
    let y0 = if oh > cs {
        rng.random_range(0..=oh - cs)
    } else {
        0
    };
    let x0 = if ow > cs {
        rng.random_range(0..=ow - cs)
    } else {
        0
    };
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    // Window is taken on the unflipped raster; mirroring happens inside it.
    let rgb = window(rgb.data(), oh, ow, 3, y0, x0, cs, cs, flip, 0.0);
    let depth = window(depth.data(), oh, ow, 3, y0, x0, cs, cs, flip, 0.0);
    let labels = window(&labels, oh, ow, 1, y0, x0, cs, cs, flip, cfg.ignore_index);

    let mut rgb = Tensor::from_vec(&[cs, cs, 3], rgb)?;
    photometric(&mut rgb, rng, cfg);
    RgbdSample::new(rgb, Tensor::from_vec(&[cs, cs, 3], depth)?, labels)
}

/// Brightness shift, contrast and saturation scaling, each drawn independently.
pub fn photometric<R: Rng + ?Sized>(rgb: &mut Tensor, rng: &mut R, cfg: &AugmentConfig) {
    let p = cfg.photometric_prob.clamp(0.0, 1.0);
    let data = rgb.data_mut();
    if rng.random_bool(p) && cfg.brightness > 0.0 {
        let delta = rng.random_range(-cfg.brightness..cfg.brightness);
        data.iter_mut().for_each(|v| *v += delta);
    }
    if rng.random_bool(p) && cfg.contrast.1 > cfg.contrast.0 {
        let a = rng.random_range(cfg.contrast.0..cfg.contrast.1);
        data.iter_mut().for_each(|v| *v *= a);
    }
    if rng.random_bool(p) && cfg.saturation.1 > cfg.saturation.0 {
        let a = rng.random_range(cfg.saturation.0..cfg.saturation.1);
        for px in data.chunks_mut(3) {
            let grey = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.iter_mut().for_each(|v| *v = grey + a * (*v - grey));
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        let raw = Tensor::from_vec(&[1, 2], vec![0.0, 100.0]).unwrap();
        let d = normalize_depth(&raw).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_depth_is_zero() {
        let d = normalize_depth(&Tensor::full(&[4, 4], 3.5)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_depth_rejected() {
        let raw = Tensor::from_vec(&[1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(normalize_depth(&raw), Err(Error::NonFinite(1))));
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(
            synth_scene(7, 64, 64, 6).unwrap(),
            synth_scene(7, 64, 64, 6).unwrap()
        );
        assert_ne!(
            synth_scene(7, 64, 64, 6).unwrap(),
            synth_scene(8, 64, 64, 6).unwrap()
        );
    }

    #[test]
    fn zero_regions_is_background_only() {
        let cfg = SynthConfig {
            regions: (0, 0),
            ..SynthConfig::default()
        };
        let s = synth_scene_with(3, 32, 32, 6, &cfg).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
        assert!(s.depth3.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_of_larger_sample() {
        let s = synth_scene(1, 512, 512, 6).unwrap();
        let cfg = AugmentConfig {
            scale_range: (1.0, 1.0),
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s, &mut rng, &cfg).unwrap();
        assert_eq!(a.rgb.shape(), &[448, 448, 3]);
        assert_eq!(a.labels.len(), 448 * 448);
    }

    #[test]
    fn small_sample_is_padded_with_ignore() {
        let s = synth_scene(1, 32, 32, 6).unwrap();
        let cfg = AugmentConfig {
            crop_size: 64,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            ..AugmentConfig::default()
        };
        let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        assert_eq!(a.labels[63], DEFAULT_IGNORE_INDEX);
        assert_eq!(a.labels[0], s.labels[0]);
        assert_eq!(a.depth3.data()[63 * 3], 0.0);
    }

    #[test]
    fn photometric_leaves_depth_and_labels() {
        let s = synth_scene(2, 64, 64, 6).unwrap();
        let cfg = AugmentConfig {
            crop_size: 64,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            photometric_prob: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        assert_eq!(a.depth3, s.depth3);
        assert_eq!(a.labels, s.labels);
        assert_ne!(a.rgb, s.rgb);
    }

    #[test]
    fn stack_rejects_mixed_sizes() {
        let a = synth_scene(1, 32, 32, 3).unwrap();
        let b = synth_scene(1, 64, 64, 3).unwrap();
        assert!(stack(&[a.clone(), a.clone()]).is_ok());
        assert!(stack(&[a, b]).is_err());
    }
}
