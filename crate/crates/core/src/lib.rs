//! Frozen plain-ViT side adapter for RGB-D semantic parsing.
//!
//! A convolutional dual-modality stem builds a three-level spatial prior.
//! Each backbone stage is preceded by confidence-recalibrated injection of
//! that prior and followed by gated integration and extraction back into it.
//! Everything runs on a small reverse-mode autograd engine over `f64`.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod dspe;
pub mod error;
pub mod graph;
pub mod hgfi;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod resize;
pub mod rhff;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use model::{Ablation, BatchInput, Hfit, HfitConfig};
pub use params::{ParamId, ParamStore};
pub use pyramid::PyramidLayout;
pub use resize::ResizeMode;
pub use tensor::Tensor;
