//! Run configuration: one flat JSON object holding model and training keys.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::cells::CrurConfig;
use crate::error::{CrurError, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: CrurConfig,
    pub train: TrainConfig,
}

/// Overlays `keys` on the serialized defaults of `T`. On failure, finds
/// which keys are at fault by overlaying them one at a time.
fn overlay<T: Serialize + DeserializeOwned + Default>(
    keys: &Map<String, Value>,
) -> std::result::Result<T, Vec<String>> {
    let base = match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config structs serialize to objects"),
    };
    let build = |extra: &mut dyn Iterator<Item = (&String, &Value)>| {
        let mut m = base.clone();
        for (k, v) in extra {
            m.insert(k.clone(), v.clone());
        }
        serde_json::from_value::<T>(Value::Object(m))
    };
    match build(&mut keys.iter()) {
        Ok(t) => Ok(t),
        Err(_) => Err(keys
            .iter()
            .filter(|(k, v)| build(&mut std::iter::once((*k, *v))).is_err())
            .map(|(k, _)| k.clone())
            .collect()),
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CrurError::Config {
            msg: format!("config is not valid JSON: {e}"),
            keys: Vec::new(),
        })?;
        let Value::Object(map) = value else {
            return Err(CrurError::Config {
                msg: "config must be a JSON object".into(),
                keys: Vec::new(),
            });
        };
        let mut model_keys = Map::new();
        let mut train_keys = Map::new();
        let mut unknown = Vec::new();
        for (k, v) in map {
            if CrurConfig::KEYS.contains(&k.as_str()) {
                model_keys.insert(k, v);
            } else if TrainConfig::KEYS.contains(&k.as_str()) {
                train_keys.insert(k, v);
            } else {
                unknown.push(k);
            }
        }
        if !unknown.is_empty() {
            return Err(CrurError::Config {
                msg: format!("unknown config keys: {}", unknown.join(", ")),
                keys: unknown,
            });
        }
        let model = overlay::<CrurConfig>(&model_keys);
        let train = overlay::<TrainConfig>(&train_keys);
        let (model, train) = match (model, train) {
            (Ok(m), Ok(t)) => (m, t),
            (m, t) => {
                let mut keys = m.err().unwrap_or_default();
                keys.extend(t.err().unwrap_or_default());
                return Err(CrurError::Config {
                    msg: format!("invalid values for config keys: {}", keys.join(", ")),
                    keys,
                });
            }
        };
        let cfg = RunConfig { model, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Structural checks. `vocab_size` may be 0 here since it is filled
    /// in from the data.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.train.validate()
    }

    /// Flat JSON object with every key.
    pub fn to_json(&self) -> Result<String> {
        let mut map = Map::new();
        for part in [
            serde_json::to_value(&self.model)?,
            serde_json::to_value(&self.train)?,
        ] {
            if let Value::Object(m) = part {
                map.extend(m);
            }
        }
        Ok(serde_json::to_string_pretty(&Value::Object(map))?)
    }
}
