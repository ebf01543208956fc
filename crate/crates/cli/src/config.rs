//! Flat JSON run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tpe_core::model::ModelConfig;
use tpe_core::train::TrainConfig;

use crate::CliError;

/// Every model and training key at the top level, plus dataset and output paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_data: None,
            val_data: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

/// Parses `key=value`; the value is read as JSON, falling back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Reads an optional config file, then applies overrides in order.
pub fn load_run_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut map = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::Usage(format!("{}: expected a JSON object", p.display()))),
                Err(e) => return Err(CliError::Usage(format!("{}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    let known = known_keys();
    if let Some(bad) = map.keys().find(|k| !known.contains(*k)) {
        return Err(CliError::Usage(format!("unknown config key {bad:?}")));
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_json() {
        let cfg = RunConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert!(v.get("d_model").is_some() && v.get("batch_size").is_some() && v.get("mode").is_some());
        assert_eq!(serde_json::from_value::<RunConfig>(v).unwrap(), cfg);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let o = vec![parse_override("lr=0.01").unwrap(), parse_override("mode=row_only").unwrap()];
        let cfg = load_run_config(None, &o).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.mode, tpe_core::AttentionMode::RowOnly);
        assert!(load_run_config(None, &[parse_override("learning_rate=1").unwrap()]).is_err());
        assert!(load_run_config(None, &[parse_override("batch_size=0").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }
}
