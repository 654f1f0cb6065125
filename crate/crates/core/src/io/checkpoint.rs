use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_bytes, Reader};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KSPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

/// Where one tensor lives in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub section: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Model and optimizer state in 32-bit precision.
///
/// Layout: magic, `u32` version, `u64` header length, JSON header, then the
/// little-endian `f32` payload in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub params: ParamStore<f32>,
    pub optimizer: AdamState<f32>,
}

impl Checkpoint {
    pub fn from_state<T: Real>(model: &ModelConfig, train: &TrainConfig, state: &TrainState<T>) -> Self {
        Checkpoint {
            model: model.clone(),
            train: train.clone(),
            step: state.step,
            params: state.params.cast(),
            optimizer: state.optimizer.cast(),
        }
    }

    pub fn to_state<T: Real>(&self) -> TrainState<T> {
        TrainState {
            params: self.params.cast(),
            optimizer: self.optimizer.cast(),
            step: self.step,
        }
    }

    fn stores(&self) -> [&ParamStore<f32>; 3] {
        [&self.params, &self.optimizer.m, &self.optimizer.v]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (section, store) in SECTIONS.iter().zip(self.stores()) {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    section: section.to_string(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let payload = r.rest();
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let section = SECTIONS
                .iter()
                .position(|s| *s == e.section)
                .ok_or_else(|| Error::Format(format!("unknown section `{}`", e.section)))?;
            if stores[section].contains(&e.name) {
                return Err(Error::Format(format!("tensor `{}/{}` appears twice", e.section, e.name)));
            }
            if e.offset != expected_offset {
                return Err(Error::Format(format!("tensor `{}/{}` has offset {}", e.section, e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Format(format!("payload too short for `{}/{}`", e.section, e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            stores[section].insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset as usize
            )));
        }
        let [params, m, v] = stores;
        let ck = Checkpoint {
            model: header.model,
            train: header.train,
            step: header.step,
            params,
            optimizer: AdamState {
                step: header.optimizer_step,
                m,
                v,
            },
        };
        ck.validate()?;
        Ok(ck)
    }

    /// Every section holds exactly the parameters of `self.model`, with matching shapes.
    pub fn validate(&self) -> Result<()> {
        let reference = init_params::<f32>(&self.model, 0)?;
        for (section, store) in SECTIONS.iter().zip(self.stores()) {
            for (name, t) in reference.iter() {
                let got = store
                    .get(name)
                    .map_err(|_| Error::Format(format!("checkpoint is missing tensor `{section}/{name}`")))?;
                if got.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "tensor `{section}/{name}` has shape {:?}, model expects {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
            if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
                return Err(Error::Format(format!(
                    "checkpoint has tensor `{section}/{extra}` that the model does not use"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny(16);
        let params = init_params::<f32>(&model, 4).unwrap();
        let mut optimizer = AdamState::new(&params);
        optimizer.step = 7;
        optimizer.m.get_mut("tok.fc1.w").unwrap().data_mut()[0] = 0.25;
        Checkpoint {
            model,
            train: TrainConfig { lr: 3.3e-4, ..TrainConfig::default() },
            step: 7,
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_missing_and_extra_tensors() {
        let mut ck = sample();
        ck.params.insert("bogus.w", Tensor::zeros([2]));
        assert!(ck.to_bytes().is_err());

        let good = sample();
        let mut fewer = ParamStore::new();
        for (n, t) in good.params.iter().skip(1) {
            fewer.insert(n.clone(), t.clone());
        }
        let missing = Checkpoint { params: fewer, ..good.clone() };
        let err = missing.validate().unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");

        // A checkpoint for a larger model does not load as a smaller one.
        let mut bytes = good.to_bytes().unwrap();
        let wrong = Checkpoint {
            model: ModelConfig { n_hr: 1, ..good.model.clone() },
            ..good
        };
        assert!(wrong.validate().is_err());
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_other_versions_and_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn state_conversion_round_trips() {
        let ck = sample();
        let state = ck.to_state::<f64>();
        assert_eq!(Checkpoint::from_state(&ck.model, &ck.train, &state), ck);
    }
}
