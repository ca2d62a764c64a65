//! Self-describing JSON checkpoints. Tensors are stored as base64 of their
//! little-endian `f64` bytes so values survive exactly.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::cells::CrurConfig;
use crate::error::{CrurError, Result};
use crate::model::CrurModel;
use crate::params::Params;
use crate::tensor::Tensor;
use crate::training::TrainConfig;
use crate::vocab::Vocab;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    data: String,
}

impl StoredTensor {
    fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, name: &str) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| CrurError::Checkpoint(format!("{name}: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(CrurError::Checkpoint(format!(
                "{name}: byte length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), data)
            .map_err(|e| CrurError::Checkpoint(format!("{name}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CrurModel,
    pub train: TrainConfig,
    pub vocab: Vocab,
    /// Seed every random stream of the run is derived from.
    pub seed: u64,
    /// Completed teacher-forced epochs.
    pub epoch: usize,
    /// Completed self-critical steps.
    pub scst_step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format_version: u32,
    model: CrurConfig,
    train: TrainConfig,
    vocab: Vocab,
    seed: u64,
    epoch: usize,
    scst_step: usize,
    params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            epoch: self.epoch,
            scst_step: self.scst_step,
            params: self
                .model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), StoredTensor::encode(t)))
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&stored)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CrurError::Checkpoint(format!("not a checkpoint: {e}")))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(CrurError::Checkpoint(format!(
                    "format_version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(CrurError::Checkpoint("missing format_version".into())),
        }
        let stored: Stored = serde_json::from_value(value)
            .map_err(|e| CrurError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let mut params = Params::new();
        for (name, t) in &stored.params {
            params.insert(name.clone(), t.decode(name)?);
        }
        if stored.vocab.len() != stored.model.vocab_size {
            return Err(CrurError::Checkpoint(format!(
                "vocabulary has {} entries but the model expects {}",
                stored.vocab.len(),
                stored.model.vocab_size
            )));
        }
        let model = CrurModel::from_params(stored.model, params)
            .map_err(|e| CrurError::Checkpoint(e.to_string()))?;
        Ok(Self {
            model,
            train: stored.train,
            vocab: stored.vocab,
            seed: stored.seed,
            epoch: stored.epoch,
            scst_step: stored.scst_step,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
