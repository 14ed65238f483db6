//! Token layout conventions shared by every module.
//!
//! Grids are row-major `h × w × D` tensors, so a grid and its token matrix
//! `(h·w) × D` share one buffer: row `r·w + c` is cell `(r, c)`. Adapter
//! pyramids concatenate three such grids at strides 8, 16 and 32, finest
//! first.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::resize::{self, AxisWeights, ResizeMode};
use crate::tensor::Tensor;

/// Strides of the three pyramid levels, finest first.
pub const STRIDES: [usize; 3] = [8, 16, 32];
/// Stride of the backbone token grid.
pub const VIT_STRIDE: usize = 16;
/// Index of the 1/16 level inside a pyramid.
pub const VIT_LEVEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub token_offset: usize,
}

impl LevelSpec {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Level metadata of a pyramid built for one `(H, W)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidLayout {
    pub levels: [LevelSpec; 3],
}

impl PyramidLayout {
    pub fn for_input(height: usize, width: usize) -> Result<Self> {
        check_input_size(height, width)?;
        let mut offset = 0;
        let levels = STRIDES.map(|stride| {
            let l = LevelSpec {
                stride,
                grid_h: height / stride,
                grid_w: width / stride,
                token_offset: offset,
            };
            offset += l.tokens();
            l
        });
        Ok(Self { levels })
    }

    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(LevelSpec::tokens).sum()
    }

    pub fn input_size(&self) -> (usize, usize) {
        let l = self.levels[0];
        (l.grid_h * l.stride, l.grid_w * l.stride)
    }
}

/// `H·W·(1/64 + 1/256 + 1/1024)`.
pub fn pyramid_token_count(height: usize, width: usize) -> usize {
    height * width * 21 / 1024
}

pub fn vit_token_count(height: usize, width: usize) -> usize {
    height * width / (VIT_STRIDE * VIT_STRIDE)
}

pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::InvalidShape(alloc::format!(
            "input {height}x{width} is not a nonzero multiple of 32"
        )));
    }
    Ok(())
}

/// Flattened multi-scale adapter tokens, `T_total × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPyramid {
    pub tokens: Tensor,
    pub layout: PyramidLayout,
}

/// Backbone tokens at stride 16, `(H/16 · W/16) × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct VitTokens {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl VitTokens {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] != grid_h * grid_w {
            return Err(Error::ShapeMismatch {
                expected: alloc::vec![grid_h * grid_w, tokens.last_dim()],
                actual: tokens.shape().to_vec(),
            });
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }
}

/// `h × w × D` grid to `(h·w) × D` tokens.
pub fn grid_to_tokens(grid: &Tensor) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::InvalidShape(alloc::format!(
            "expected h×w×D grid, got {s:?}"
        )));
    }
    grid.clone().reshape(&[s[0] * s[1], s[2]])
}

/// `(h·w) × D` tokens to an `h × w × D` grid.
pub fn tokens_to_grid(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::ShapeMismatch {
            expected: alloc::vec![h * w, tokens.last_dim()],
            actual: s.to_vec(),
        });
    }
    tokens.clone().reshape(&[h, w, s[1]])
}

/// Flatten grids at strides 8/16/32 and concatenate them, finest first.
pub fn flatten_concat(grids: [&Tensor; 3]) -> Result<TokenPyramid> {
    let s0 = grids[0].shape();
    if s0.len() != 3 {
        return Err(Error::InvalidShape(alloc::format!(
            "expected h×w×D grid, got {s0:?}"
        )));
    }
    let layout = PyramidLayout::for_input(s0[0] * STRIDES[0], s0[1] * STRIDES[0])?;
    let dim = s0[2];
    for (g, l) in grids.iter().zip(&layout.levels) {
        let want = [l.grid_h, l.grid_w, dim];
        if g.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                actual: g.shape().to_vec(),
            });
        }
    }
    let flat: Vec<Tensor> = grids
        .iter()
        .map(|g| grid_to_tokens(g))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = flat.iter().collect();
    Ok(TokenPyramid {
        tokens: Tensor::concat(&refs, 0)?,
        layout,
    })
}

/// Inverse of [`flatten_concat`].
pub fn split_levels(p: &TokenPyramid) -> Result<[Tensor; 3]> {
    let d = p.tokens.last_dim();
    let [a, b, c] = p.layout.levels.map(|l| {
        p.tokens
            .narrow(0, l.token_offset, l.tokens())
            .and_then(|t| t.reshape(&[l.grid_h, l.grid_w, d]))
    });
    Ok([a?, b?, c?])
}

/// Resample an `h × w × c` grid to `target_h × target_w × c`.
pub fn resample(
    map: &Tensor,
    target_h: usize,
    target_w: usize,
    mode: ResizeMode,
) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 || target_h == 0 || target_w == 0 {
        return Err(Error::InvalidShape(alloc::format!(
            "cannot resample {s:?} to {target_h}x{target_w}"
        )));
    }
    if (s[0], s[1]) == (target_h, target_w) {
        return Ok(map.clone());
    }
    let wy = AxisWeights::new(s[0], target_h, mode);
    let wx = AxisWeights::new(s[1], target_w, mode);
    let out = resize::forward(map.data(), 1, s[2], &wy, &wx);
    Tensor::from_vec(&[target_h, target_w, s[2]], out)
}

/// Graph form of [`split_levels`] over batched tokens `[B, T, D]`:
/// returns one `[B, h, w, D]` grid per level.
pub fn split_levels_var(g: &mut Graph<'_>, tokens: Var, layout: &PyramidLayout) -> [Var; 3] {
    let s = g.shape(tokens).to_vec();
    let (b, d) = (s[0], s[2]);
    layout.levels.map(|l| {
        let part = g.narrow(tokens, 1, l.token_offset, l.tokens());
        g.reshape(part, &[b, l.grid_h, l.grid_w, d])
    })
}

/// Graph form of [`flatten_concat`]: `[B, h, w, D]` grids to `[B, T, D]`.
pub fn flatten_concat_var(g: &mut Graph<'_>, grids: [Var; 3]) -> Var {
    let flat = grids.map(|v| {
        let s = g.shape(v).to_vec();
        g.reshape(v, &[s[0], s[1] * s[2], s[3]])
    });
    g.concat(&flat, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, d: usize, salt: f64) -> Tensor {
        Tensor::from_fn(&[h, w, d], |i| salt + i as f64 * 0.5)
    }

    #[test]
    fn grid_token_round_trips() {
        let one = Tensor::from_vec(&[1, 1, 3], alloc::vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(grid_to_tokens(&one).unwrap().data(), one.data());

        let abcd = Tensor::from_vec(&[2, 2, 1], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = grid_to_tokens(&abcd).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tokens_to_grid(&t, 2, 2).unwrap(), abcd);

        let x = grid(4, 6, 8, 0.25);
        assert_eq!(
            tokens_to_grid(&grid_to_tokens(&x).unwrap(), 4, 6).unwrap(),
            x
        );
        let y = grid(3, 5, 4, -1.0);
        assert_eq!(
            tokens_to_grid(&grid_to_tokens(&y).unwrap(), 3, 5).unwrap(),
            y
        );
    }

    #[test]
    fn tokens_to_grid_rejects_wrong_count() {
        let t = Tensor::zeros(&[5, 3]);
        assert!(matches!(
            tokens_to_grid(&t, 2, 2),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn token_counts() {
        let l = PyramidLayout::for_input(448, 448).unwrap();
        assert_eq!(l.levels.map(|l| l.tokens()), [3136, 784, 196]);
        assert_eq!(l.total_tokens(), 4116);
        let l = PyramidLayout::for_input(64, 64).unwrap();
        assert_eq!(l.total_tokens(), 84);
        assert_eq!(l.levels.map(|l| l.token_offset), [0, 64, 80]);
        assert_eq!(
            pyramid_token_count(64, 96),
            PyramidLayout::for_input(64, 96).unwrap().total_tokens()
        );
        assert!(PyramidLayout::for_input(48, 64).is_err());
    }

    #[test]
    fn flatten_split_round_trip() {
        let gs = [
            grid(8, 8, 3, 0.0),
            grid(4, 4, 3, 100.0),
            grid(2, 2, 3, 200.0),
        ];
        let p = flatten_concat([&gs[0], &gs[1], &gs[2]]).unwrap();
        assert_eq!(p.tokens.shape(), &[84, 3]);
        assert_eq!(p.layout.levels.map(|l| l.token_offset), [0, 64, 80]);
        let back = split_levels(&p).unwrap();
        assert_eq!(back, gs);
        let shapes: Vec<_> = back.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, [[8, 8, 3], [4, 4, 3], [2, 2, 3]]);
    }

    #[test]
    fn constant_pyramid_splits_into_constant_grids() {
        let p = TokenPyramid {
            tokens: Tensor::full(&[84, 1], 0.3),
            layout: PyramidLayout::for_input(64, 64).unwrap(),
        };
        for g in split_levels(&p).unwrap() {
            assert!(g.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn flatten_concat_rejects_inconsistent_sizes() {
        // 1/32 grid taken from a 96x96 input next to 64x64 grids.
        let gs = [grid(8, 8, 2, 0.0), grid(4, 4, 2, 0.0), grid(3, 3, 2, 0.0)];
        assert!(flatten_concat([&gs[0], &gs[1], &gs[2]]).is_err());
        let gs = [grid(8, 8, 2, 0.0), grid(4, 4, 3, 0.0), grid(2, 2, 2, 0.0)];
        assert!(flatten_concat([&gs[0], &gs[1], &gs[2]]).is_err());
    }

    #[test]
    fn resample_cases() {
        let c = Tensor::full(&[3, 5, 2], 0.7);
        for (h, w) in [(1, 1), (6, 10), (2, 3)] {
            for mode in [
                ResizeMode::Bilinear,
                ResizeMode::Nearest,
                ResizeMode::Bicubic,
            ] {
                let r = resample(&c, h, w, mode).unwrap();
                assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
            }
        }
        let x = Tensor::from_vec(&[2, 2, 1], alloc::vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            resample(&x, 1, 1, ResizeMode::Bilinear).unwrap().data(),
            &[0.5]
        );
        let y = grid(3, 4, 2, 1.0);
        assert_eq!(resample(&y, 3, 4, ResizeMode::Bilinear).unwrap(), y);
    }
}
