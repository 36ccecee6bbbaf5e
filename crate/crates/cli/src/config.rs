//! Layered settings: command-line flags over a TOML config file over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{AnchorsArgs, EnhanceArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};
use crate::Invalid;

/// Config file contents; every section mirrors its subcommand's flags.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: Option<SynthArgs>,
    pub anchors: Option<AnchorsArgs>,
    #[serde(rename = "train-retinex")]
    pub train_retinex: Option<TrainArgs>,
    pub enhance: Option<EnhanceArgs>,
    pub eval: Option<EvalArgs>,
    pub gradcheck: Option<GradcheckArgs>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
    }
}

/// Overlays the non-empty fields of `flags` onto `file`.
pub fn layer<T>(flags: &T, file: Option<&T>) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut merged = match file {
        Some(f) => serde_json::to_value(f)?,
        None => Value::Object(Default::default()),
    };
    if let (Value::Object(base), Value::Object(top)) = (&mut merged, serde_json::to_value(flags)?) {
        for (k, v) in top {
            if !v.is_null() && v != Value::Bool(false) {
                base.insert(k, v);
            }
        }
    }
    Ok(serde_json::from_value(merged)?)
}
