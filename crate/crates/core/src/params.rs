//! Named parameter storage shared by every module of the model.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned tensor.
    Weight,
    /// Non-learned state carried in checkpoints (normalization running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl ParamEntry {
    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            kind,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].is_trainable()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen (or not).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.is_trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Replace the value of `name`, keeping its shape contract.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::ParamMismatch {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    /// FNV-1a over names and raw value bits of every entry matching `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            eat(e.name.as_bytes());
            for v in e.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Seeded initializer: truncated normal weights, constant biases.
pub struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    /// Normal(0, std²) truncated to ±2 std by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let std = self.std;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(lo..hi))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_by_prefix_and_checksum() {
        let mut s = ParamStore::new();
        let a = s.insert("backbone.w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        let b = s.insert("adapter.w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        s.insert("adapter.bn.mean", Tensor::zeros(&[2]), ParamKind::Buffer);
        s.set_frozen("backbone.", true);
        assert_eq!(s.trainable_ids(), alloc::vec![b]);
        let before = s.checksum("backbone.");
        s.get_mut(b).data_mut()[0] = 3.0;
        assert_eq!(s.checksum("backbone."), before);
        s.get_mut(a).data_mut()[0] = 3.0;
        assert_ne!(s.checksum("backbone."), before);
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let a = Init::new(7, 0.02).trunc_normal(&[1000]);
        let b = Init::new(7, 0.02).trunc_normal(&[1000]);
        assert_eq!(a, b);
        assert!(a.max_abs() <= 0.04);
        let mean = a.sum() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 3]), ParamKind::Weight);
        assert!(s.assign("w", Tensor::zeros(&[3, 2])).is_err());
        assert!(s.assign("v", Tensor::zeros(&[3, 2])).is_err());
        assert!(s.assign("w", Tensor::full(&[2, 3], 1.0)).is_ok());
    }
}
