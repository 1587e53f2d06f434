//! Binary weight serialization.
//!
//! Layout: magic "HSIW", little-endian u32 version (= 1), u32 tensor count,
//! then per tensor: u32 name length, UTF-8 name, u32 rank, rank u32 extents,
//! and the raw little-endian f32 data, row-major. Loading is strict: when a
//! store is applied to a model, unknown, missing, or reshaped tensors are
//! all rejected by name.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::StyleModel;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HSIW";
pub const VERSION: u32 = 1;

/// Ordered named tensors; order is preserved through save/load so a
/// round-trip is byte-identical.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, tensor: Tensor) {
        self.entries.push((name, tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn from_model(model: &StyleModel) -> Self {
        let mut store = WeightStore::new();
        model.visit(&mut |name, t| store.push(name, t.clone()));
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::WeightFormat {
                message: "not a weight file (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::WeightFormat {
                message: format!("unsupported version {version} (expected {VERSION})"),
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::WeightFormat {
                    message: format!("invalid tensor name at offset {}", r.offset - name_len),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::WeightFormat {
                    message: format!("tensor '{name}' has invalid rank {rank}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.offset != bytes.len() {
            return Err(Error::WeightFormat {
                message: format!(
                    "{} trailing bytes after offset {}",
                    bytes.len() - r.offset,
                    r.offset
                ),
            });
        }
        Ok(WeightStore { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Write these tensors into the model. The name sets and shapes must
    /// match exactly; offenders are listed by name.
    pub fn apply_to_model(&self, model: &mut StyleModel) -> Result<()> {
        let mut expected = std::collections::BTreeMap::new();
        model.visit(&mut |name, t| {
            expected.insert(name, t.shape().to_vec());
        });

        let mut unexpected = Vec::new();
        let mut mismatched = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (name, tensor) in &self.entries {
            match expected.get(name.as_str()) {
                None => unexpected.push(name.clone()),
                Some(shape) if shape != tensor.shape() => mismatched.push(name.clone()),
                Some(_) => {
                    seen.insert(name.clone());
                }
            }
        }
        let missing: Vec<String> = expected
            .keys()
            .filter(|name| !seen.contains(**name) && !mismatched.contains(*name))
            .map(|s| (*s).clone())
            .collect();
        if !unexpected.is_empty() || !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::WeightSchema {
                unexpected,
                missing,
                mismatched,
            });
        }

        let by_name: std::collections::BTreeMap<&str, &Tensor> = self
            .entries
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        model.visit_mut(&mut |name, t| {
            let src = by_name.get(name.as_str()).expect("validated above");
            t.data_mut().copy_from_slice(src.data());
        });
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::WeightFormat {
                message: format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.offset,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::EncoderMode;

    #[test]
    fn roundtrip_is_byte_identical() {
        let model = StyleModel::seeded(EncoderMode::Mini, 2, 42);
        let store = WeightStore::from_model(&model);
        let bytes = store.to_bytes();
        let reloaded = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes);
    }

    #[test]
    fn apply_restores_identical_model() {
        let model = StyleModel::seeded(EncoderMode::Mini, 1, 7);
        let store = WeightStore::from_model(&model);
        let mut other = StyleModel::seeded(EncoderMode::Mini, 1, 99);
        assert_ne!(model, other);
        store.apply_to_model(&mut other).unwrap();
        assert_eq!(model, other);
    }

    #[test]
    fn bad_magic_rejected() {
        let model = StyleModel::seeded(EncoderMode::Mini, 1, 1);
        let mut bytes = WeightStore::from_model(&model).to_bytes();
        bytes[0] = b'X';
        let err = WeightStore::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("not a weight file"), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let model = StyleModel::seeded(EncoderMode::Mini, 1, 1);
        let mut bytes = WeightStore::from_model(&model).to_bytes();
        bytes[4] = 2;
        let err = WeightStore::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let model = StyleModel::seeded(EncoderMode::Mini, 1, 1);
        let bytes = WeightStore::from_model(&model).to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        let err = WeightStore::from_bytes(cut).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("offset"), "{msg}");
    }

    #[test]
    fn unknown_tensor_names_rejected_with_list() {
        let mut model = StyleModel::seeded(EncoderMode::Mini, 1, 3);
        let mut store = WeightStore::from_model(&model);
        store.push("mystery.tensor".into(), Tensor::ones(&[2, 2]).unwrap());
        let err = store.apply_to_model(&mut model).unwrap_err();
        match err {
            Error::WeightSchema { unexpected, .. } => {
                assert_eq!(unexpected, vec!["mystery.tensor".to_string()]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_and_mismatched_rejected() {
        let mut model = StyleModel::seeded(EncoderMode::Mini, 1, 3);
        let full = WeightStore::from_model(&model);

        let mut missing = WeightStore::new();
        for (name, t) in full.entries().iter().skip(1) {
            missing.push(name.clone(), t.clone());
        }
        assert!(matches!(
            missing.apply_to_model(&mut model),
            Err(Error::WeightSchema { .. })
        ));

        let mut mismatched = WeightStore::new();
        for (i, (name, t)) in full.entries().iter().enumerate() {
            if i == 0 {
                mismatched.push(name.clone(), Tensor::ones(&[1, 1, 1, 1]).unwrap());
            } else {
                mismatched.push(name.clone(), t.clone());
            }
        }
        assert!(matches!(
            mismatched.apply_to_model(&mut model),
            Err(Error::WeightSchema { .. })
        ));
    }
}
