//! Binary checkpoint: 8-byte magic, u32 version, u64 header length, a JSON
//! header (kind, config, vocabulary, tensor names and shapes), then every
//! tensor's data as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CmlFormer, ModelConfig, ModelError, ParamStore, SequenceClassifier};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMLFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrained,
    Classifier { num_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + self.params.numel() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| corrupt("truncated"))?;
        if body.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let mut data = &body[header_len..];
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(corrupt(format!("truncated data for {}", entry.name)));
            }
            let values = data[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            data = &data[n * 8..];
            tensors.push(Tensor::new(entry.shape, values)?);
            names.push(entry.name);
        }
        if !data.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", data.len())));
        }
        let params = ParamStore::from_parts(names, tensors)?;
        Ok(Self { kind: header.kind, config: header.config, vocab: header.vocab, params })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the pre-training model and checks the stored tensors fit it.
    pub fn pretrained_model(&self) -> Result<CmlFormer, ModelError> {
        if self.kind != CheckpointKind::Pretrained {
            return Err(corrupt("expected a pre-training checkpoint"));
        }
        let model = CmlFormer::new(self.config.clone())?;
        self.params.check_layout(model.layout())?;
        Ok(model)
    }

    pub fn classifier_model(&self) -> Result<SequenceClassifier, ModelError> {
        let CheckpointKind::Classifier { num_classes } = self.kind else {
            return Err(corrupt("expected a classifier checkpoint"));
        };
        let model = SequenceClassifier::new(self.config.clone(), num_classes)?;
        self.params.check_layout(model.layout())?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig::tiny(12);
        let model = CmlFormer::new(config.clone()).unwrap();
        Checkpoint {
            kind: CheckpointKind::Pretrained,
            config,
            vocab: (0..12).map(|i| format!("t{i}")).collect(),
            params: model.init_params(9),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for ((_, _, a), (_, _, b)) in ck.params.iter().zip(back.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        back.pretrained_model().unwrap();
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(sample().classifier_model().is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
