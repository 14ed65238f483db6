//! Binary checkpoints: `HFITCKPT`, a little-endian `u32` version, a `u64`
//! header length, a JSON header and raw little-endian `f64` tensor data.

use std::io::{Read, Write};
use std::path::Path;

use hfit_core::params::ParamKind;
use hfit_core::{Hfit, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HFITCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
    frozen: bool,
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelSection,
    fingerprint: String,
    iteration: usize,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub name: String,
    pub kind: ParamKind,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelSection,
    pub fingerprint: u64,
    pub iteration: usize,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Hfit, section: &ModelSection, iteration: usize) -> Self {
        let tensors = model
            .params
            .entries()
            .map(|(_, e)| StoredTensor {
                name: e.name.clone(),
                kind: e.kind,
                frozen: e.frozen,
                value: e.value.clone(),
            })
            .collect();
        Self {
            model: section.clone(),
            fingerprint: section.fingerprint(),
            iteration,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0;
        let records = self
            .tensors
            .iter()
            .map(|t| {
                let r = TensorRecord {
                    name: t.name.clone(),
                    shape: t.value.shape().to_vec(),
                    buffer: t.kind == ParamKind::Buffer,
                    frozen: t.frozen,
                    offset,
                };
                offset += t.value.numel();
                r
            })
            .collect();
        let header = Header {
            model: self.model.clone(),
            fingerprint: format!("{:016x}", self.fingerprint),
            iteration: self.iteration,
            tensors: records,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(20 + json.len() + offset * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| fail("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| fail(&format!("bad header: {e}")))?;
        let data = &bytes[20 + hlen..];
        let fingerprint =
            u64::from_str_radix(&header.fingerprint, 16).map_err(|_| fail("bad fingerprint"))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for r in header.tensors {
            let n: usize = r.shape.iter().product();
            let raw = data
                .get(r.offset * 8..(r.offset + n) * 8)
                .ok_or_else(|| fail(&format!("truncated data for `{}`", r.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(StoredTensor {
                name: r.name,
                kind: if r.buffer {
                    ParamKind::Buffer
                } else {
                    ParamKind::Weight
                },
                frozen: r.frozen,
                value: Tensor::from_vec(&r.shape, values)?,
            });
        }
        Ok(Self {
            model: header.model,
            fingerprint,
            iteration: header.iteration,
            tensors,
        })
    }

    /// Fails when the checkpoint was written for a different architecture.
    pub fn check_compatible(&self, section: &ModelSection, path: &Path) -> Result<()> {
        let expected = section.fingerprint();
        if self.fingerprint != expected || self.model.fingerprint() != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "config fingerprint {:016x} does not match checkpoint {:016x}",
                    expected, self.fingerprint
                ),
            });
        }
        Ok(())
    }

    /// Copy every stored tensor into `model`; names and shapes must match.
    pub fn restore(&self, model: &mut Hfit) -> Result<()> {
        if self.tensors.len() != model.params.len() {
            return Err(Error::Core(hfit_core::Error::InvalidConfig(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                model.params.len()
            ))));
        }
        for t in &self.tensors {
            model.params.assign(&t.name, t.value.clone())?;
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.value.clone()))
            .collect()
    }

    /// Build a model from the stored config and tensors.
    pub fn into_model(&self) -> Result<Hfit> {
        let mut m = Hfit::new(self.model.to_core())?;
        self.restore(&mut m)?;
        Ok(m)
    }
}
