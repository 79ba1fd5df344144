//! Weight checkpoint container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic    8 bytes  "CRYSCKPT"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen bytes, UTF-8 JSON (model spec and training metadata)
//! count    u32      number of tensors
//! per tensor:
//!   nlen u32, name (nlen bytes UTF-8)
//!   rank u32, dims (rank x u64)
//!   data (product(dims) x f32, row major)
//! ```
//!
//! Tensors appear in graph order and include batch-norm running statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Layer;
use crate::zoo::{Model, ModelSpec};

pub const MAGIC: &[u8; 8] = b"CRYSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub epoch: Option<usize>,
    pub validation_accuracy: Option<f64>,
    pub training_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of every weight and buffer of `model`.
    pub fn capture(model: &Model) -> Self {
        let mut tensors = Vec::new();
        model.net.visit_state(&mut |name, shape, data| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                spec: model.spec.clone(),
                epoch: None,
                validation_accuracy: None,
                training_loss: None,
            },
            tensors,
        }
    }

    /// Writes the snapshot back into `model`, which must have the same graph.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if model.spec.architecture != self.header.spec.architecture {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} weights, model is {}",
                self.header.spec.architecture, model.spec.architecture
            )));
        }
        let mut it = self.tensors.iter();
        let mut failure = None;
        model.net.visit_state_mut(&mut |name, shape, data| {
            if failure.is_some() {
                return;
            }
            match it.next() {
                Some(t) if t.name == name && t.shape == shape => data.copy_from_slice(&t.data),
                Some(t) => {
                    failure = Some(format!("expected {name} {shape:?}, found {} {:?}", t.name, t.shape));
                }
                None => failure = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if let Some(t) = it.next() {
            return Err(Error::Checkpoint(format!("unexpected extra tensor {}", t.name)));
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::build(self.header.spec.clone())?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(
            64 + header.len() + self.tensors.iter().map(|t| 64 + t.name.len() + 4 * t.data.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        put_len(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_len(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} data does not match its shape", t.name)));
            }
            put_len(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_len(&mut out, t.shape.len())?;
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        if header.format_version != version {
            return Err(Error::Checkpoint("header version disagrees with file version".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::zoo::ArchitectureId;

    #[test]
    fn round_trip_is_byte_exact_and_preserves_outputs() {
        let model = Model::build(ModelSpec::new(ArchitectureId::Resnet32, 11)).unwrap();
        let mut ckpt = Checkpoint::capture(&model);
        ckpt.header.epoch = Some(3);
        ckpt.header.validation_accuracy = Some(0.1 + 0.2);
        ckpt.header.training_loss = Some(2.302585092994046);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let restored = back.into_model().unwrap();
        let x = Tensor::from_vec(&[1, 1, 128, 128], (0..128 * 128).map(|i| (i % 13) as f32 / 13.0).collect());
        assert_eq!(model.forward(&x).unwrap(), restored.forward(&x).unwrap());
    }

    #[test]
    fn batchnorm_buffers_are_stored() {
        let model = Model::build(ModelSpec::new(ArchitectureId::Resnet32, 0)).unwrap();
        let ckpt = Checkpoint::capture(&model);
        assert!(ckpt.tensors.iter().any(|t| t.name.ends_with("running_var")));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = Model::build(ModelSpec::new(ArchitectureId::Lcn, 0)).unwrap();
        let bytes = Checkpoint::capture(&model).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let lcn = Model::build(ModelSpec::new(ArchitectureId::Lcn, 0)).unwrap();
        let mut other = Model::build(ModelSpec::new(ArchitectureId::Crystalnet, 0)).unwrap();
        assert!(matches!(Checkpoint::capture(&lcn).restore_into(&mut other), Err(Error::Checkpoint(_))));
    }
}
