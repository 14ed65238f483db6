//! AdamW with linear warmup, plus a single training step for [`Hfit`].

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::{BatchInput, Hfit};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Learning rate used for the given 1-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * step as f64 / w as f64
        }
    }

    /// Apply one update. Frozen entries are skipped even if a gradient is given.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore,
        grads: impl IntoIterator<Item = (ParamId, &'a Tensor)>,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, grad) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            if p.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    actual: grad.shape().to_vec(),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite(id.index()));
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / (libm::sqrt(*v / bc2) + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Forward, backward and update on one batch; returns the loss.
pub fn train_step(
    model: &mut Hfit,
    opt: &mut AdamW,
    input: &BatchInput,
    labels: &[u8],
) -> Result<f64> {
    let (loss, grads, updates) = {
        let mut g = model.graph(Mode::Train);
        let out = model.forward(&mut g, input)?;
        let loss = model.loss(&mut g, out.logits, labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(0));
        }
        let grads = g.backward(loss);
        let owned: Vec<(ParamId, Tensor)> = grads.params().map(|(id, t)| (id, t.clone())).collect();
        (value, owned, g.take_stat_updates())
    };
    opt.step(&mut model.params, grads.iter().map(|(id, t)| (*id, t)))?;
    model.apply_stat_updates(updates);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn warmup_is_linear_then_constant() {
        let o = AdamW::new(AdamWConfig::default());
        assert_eq!(o.lr_at(1), 1e-6);
        assert_eq!(o.lr_at(50), 5e-5);
        assert_eq!(o.lr_at(100), 1e-4);
        assert_eq!(o.lr_at(20_000), 1e-4);
    }

    #[test]
    fn first_step_moves_by_lr_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.insert("a.w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        let b = store.insert("b.w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        store.set_frozen("b.", true);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        let g = Tensor::from_vec(&[2], alloc::vec![3.0, -0.5]).unwrap();
        opt.step(&mut store, [(a, &g), (b, &g)]).unwrap();
        // Bias-corrected first step is lr · sign(g).
        let got = store.get(a).data();
        assert!((got[0] - 0.9).abs() < 1e-7 && (got[1] - 1.1).abs() < 1e-7);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut store = ParamStore::new();
        let a = store.insert("w", Tensor::full(&[1], 2.0), ParamKind::Weight);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut store, [(a, &Tensor::zeros(&[1]))]).unwrap();
        assert!((store.get(a).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let a = store.insert(
            "w",
            Tensor::from_vec(&[2], alloc::vec![3.0, -4.0]).unwrap(),
            ParamKind::Weight,
        );
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        });
        for _ in 0..500 {
            let g = store.get(a).map(|w| 2.0 * w);
            opt.step(&mut store, [(a, &g)]).unwrap();
        }
        assert!(store.get(a).max_abs() < 1e-2);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("w", Tensor::zeros(&[1]), ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = Tensor::full(&[1], f64::NAN);
        assert!(matches!(
            opt.step(&mut store, [(a, &g)]),
            Err(Error::NonFinite(_))
        ));
    }
}
