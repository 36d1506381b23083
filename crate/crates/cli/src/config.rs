use std::path::Path;

use mism::data::{FilterConfig, GeneratorConfig};
use mism::model::ModelConfig;
use mism::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Failure;

/// Everything a run needs besides paths. Missing sections and fields take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Phase-1 settings for `pretrain`; `train` is used when absent.
    pub pretrain: Option<TrainConfig>,
    pub filter: FilterConfig,
    pub data: GeneratorConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `key.path=value` overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        // The model's K follows the data unless it is set explicitly.
        if root.pointer("/model/k").is_none() {
            let k = root
                .pointer("/data/k")
                .cloned()
                .unwrap_or(Value::from(GeneratorConfig::default().k));
            set_path(&mut root, &["model", "k"], k)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Failure::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        self.filter.validate()?;
        self.model.feature_config.validate()?;
        if self.model.k != self.data.k {
            return Err(Failure::config(format!(
                "model.k = {} but data.k = {}",
                self.model.k, self.data.k
            )));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> &TrainConfig {
        self.pretrain.as_ref().unwrap_or(&self.train)
    }
}

/// `train.lr=0.01` sets a number; values that are not valid JSON are
/// taken as strings.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("bad override key `{key}`")));
    }
    set_path(root, &parts, value)
}

fn set_path(root: &mut Value, parts: &[&str], value: Value) -> Result<(), Failure> {
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::config(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}
